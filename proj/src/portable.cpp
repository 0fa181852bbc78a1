#include "vasc/portable.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "vasc/error.hpp"
#include "vasc/hash.hpp"
#include "vasc/metrics.hpp"
#include "vasc/random.hpp"

namespace vasc {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "the portable format is written with host byte order");

namespace {

constexpr char kMagic[8] = {'V', 'A', 'S', 'C', 'P', 'R', 'T', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  }
  return v;
}

struct BlobWriter {
  std::vector<float> values;

  json append(const double* data, std::size_t count) {
    const std::size_t offset = values.size();
    for (std::size_t i = 0; i < count; ++i) values.push_back(static_cast<float>(data[i]));
    return {{"offset", offset}, {"count", count}};
  }
};

}  // namespace

ExportSummary export_portable(const Classifier& model, const std::filesystem::path& path) {
  std::vector<std::string> unsupported;
  json ops = json::array();
  BlobWriter blob;
  for (const auto& layer : model.backbone().layers()) {
    const Layer* l = layer.get();
    if (const auto* conv = dynamic_cast<const Conv2d*>(l)) {
      const auto p = conv->params();
      json op = {{"op", "conv2d"},
                 {"in", conv->in_channels()},
                 {"out", conv->out_channels()},
                 {"kernel", conv->kernel()},
                 {"stride", conv->stride()},
                 {"padding", conv->padding()}};
      op["weights"] = blob.append(p.data(), conv->weight_count());
      op["bias"] = blob.append(p.data() + conv->weight_count(),
                               static_cast<std::size_t>(conv->out_channels()));
      ops.push_back(op);
    } else if (const auto* pool = dynamic_cast<const AvgPool2d*>(l)) {
      ops.push_back({{"op", "avgpool2d"}, {"window", pool->window()}, {"stride", pool->stride()}});
    } else if (dynamic_cast<const Relu*>(l)) {
      ops.push_back({{"op", "relu"}});
    } else if (dynamic_cast<const GlobalAvgMaxPool*>(l)) {
      ops.push_back({{"op", "global_avg_max_pool"}});
    } else {
      unsupported.emplace_back(l->op());
    }
  }
  if (!unsupported.empty()) {
    std::string names;
    for (const auto& n : unsupported) names += (names.empty() ? "" : ", ") + n;
    throw Error(ErrorKind::Export, "unsupported operators in graph: " + names);
  }

  const Head& head = model.head();
  if (head.config().activation != "relu") {
    throw Error(ErrorKind::Export, "unsupported operators in graph: " + head.config().activation);
  }
  // Dense weights are stored [in][out], row-major.
  auto dense = [&](const Eigen::MatrixXd& w, const Eigen::RowVectorXd& b) {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(w.size()));
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) flat.push_back(w(r, c));
    }
    json op = {{"op", "dense"}, {"in", w.rows()}, {"out", w.cols()}};
    op["weights"] = blob.append(flat.data(), flat.size());
    op["bias"] = blob.append(b.data(), static_cast<std::size_t>(b.size()));
    return op;
  };
  ops.push_back(dense(head.w1, head.b1));
  ops.push_back({{"op", "relu"}});
  ops.push_back(dense(head.w2, head.b2));
  ops.push_back({{"op", "softmax"}});

  json header = {{"format", "vasc-portable"},
                 {"version", 1},
                 {"input", {{"height", model.backbone().spec().input_size},
                            {"width", model.backbone().spec().input_size},
                            {"channels", 3},
                            {"layout", "CHW"},
                            {"range", {0.0, 1.0}}}},
                 {"classes", model.class_ids()},
                 {"backbone", model.backbone().spec().name},
                 {"ops", ops}};
  const std::string header_text = header.dump();

  std::string bytes(kMagic, sizeof kMagic);
  put_u64(bytes, header_text.size());
  bytes += header_text;
  put_u64(bytes, blob.values.size() * sizeof(float));
  bytes.append(reinterpret_cast<const char*>(blob.values.data()), blob.values.size() * sizeof(float));
  Fnv1a64 fnv;
  fnv.update(bytes);
  put_u64(bytes, fnv.value());

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::Io, "failed writing " + path.string());

  ExportSummary summary;
  summary.path = path;
  summary.bytes = bytes.size();
  for (const auto& op : ops) summary.ops.push_back(op["op"]);
  summary.checksum = fnv.hex();
  return summary;
}

// ---------------------------------------------------------------- runtime

struct PortableModel::Op {
  enum class Kind { AvgPool, Conv, Relu, GlobalAvgMax, Dense, Softmax } kind;
  int a = 0, b = 0, kernel = 0, stride = 0, padding = 0;  // a/b: in/out or window
  std::size_t weights = 0, bias = 0;
  std::string name;
};

PortableModel::PortableModel() = default;
PortableModel::~PortableModel() = default;
PortableModel::PortableModel(PortableModel&&) noexcept = default;
PortableModel& PortableModel::operator=(PortableModel&&) noexcept = default;

std::vector<std::string> PortableModel::op_names() const {
  std::vector<std::string> names;
  for (const auto& op : ops_) names.push_back(op.name);
  return names;
}

PortableModel PortableModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Load, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse(buf.str());
  } catch (const Error& e) {
    throw Error(ErrorKind::Load, path.string() + ": " + e.what());
  }
}

PortableModel PortableModel::parse(const std::string& bytes) {
  auto fail = [](const std::string& why) { return Error(ErrorKind::Load, why); };
  if (bytes.size() < sizeof kMagic + 24 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw fail("not a portable model artifact (bad magic or too short)");
  }
  std::size_t at = sizeof kMagic;
  const std::uint64_t header_len = get_u64(bytes, at);
  at += 8;
  if (header_len > bytes.size() - at - 16) throw fail("artifact truncated inside the header");
  const std::string header_text = bytes.substr(at, header_len);
  at += header_len;
  const std::uint64_t blob_len = get_u64(bytes, at);
  at += 8;
  if (blob_len % sizeof(float) != 0 || blob_len > bytes.size() - at - 8) {
    throw fail("artifact truncated inside the parameter blob");
  }
  if (at + blob_len + 8 != bytes.size()) throw fail("artifact has trailing bytes");
  Fnv1a64 fnv;
  fnv.update(bytes.data(), at + blob_len);
  if (fnv.value() != get_u64(bytes, at + blob_len)) throw fail("artifact checksum mismatch");

  PortableModel m;
  m.blob_.resize(blob_len / sizeof(float));
  std::memcpy(m.blob_.data(), bytes.data() + at, blob_len);

  json header;
  try {
    header = json::parse(header_text);
    if (header.at("format") != "vasc-portable" || header.at("version") != 1) {
      throw fail("unsupported artifact format or version");
    }
    const auto& input = header.at("input");
    m.input_size_ = input.at("height");
    if (input.at("width") != m.input_size_ || input.at("channels") != 3) {
      throw fail("unsupported input geometry");
    }
    m.class_ids_ = header.at("classes").get<std::vector<std::string>>();
    auto range = [&](const json& ref) {
      const std::size_t offset = ref.at("offset"), count = ref.at("count");
      if (offset + count > m.blob_.size()) throw fail("parameter reference outside the blob");
      return offset;
    };
    for (const auto& j : header.at("ops")) {
      Op op{};
      op.name = j.at("op");
      if (op.name == "avgpool2d") {
        op.kind = Op::Kind::AvgPool;
        op.a = j.at("window");
        op.stride = j.at("stride");
      } else if (op.name == "conv2d") {
        op.kind = Op::Kind::Conv;
        op.a = j.at("in");
        op.b = j.at("out");
        op.kernel = j.at("kernel");
        op.stride = j.at("stride");
        op.padding = j.at("padding");
        op.weights = range(j.at("weights"));
        op.bias = range(j.at("bias"));
      } else if (op.name == "relu") {
        op.kind = Op::Kind::Relu;
      } else if (op.name == "global_avg_max_pool") {
        op.kind = Op::Kind::GlobalAvgMax;
      } else if (op.name == "dense") {
        op.kind = Op::Kind::Dense;
        op.a = j.at("in");
        op.b = j.at("out");
        op.weights = range(j.at("weights"));
        op.bias = range(j.at("bias"));
      } else if (op.name == "softmax") {
        op.kind = Op::Kind::Softmax;
      } else {
        throw fail("unknown operator '" + op.name + "'");
      }
      m.ops_.push_back(std::move(op));
    }
  } catch (const json::exception& e) {
    throw fail(std::string("malformed artifact header: ") + e.what());
  }
  return m;
}

namespace {

// Activation buffer: c x h x w, channel-major, float32.
struct Act {
  int c = 0, h = 0, w = 0;
  std::vector<float> v;
};

}  // namespace

std::vector<float> PortableModel::predict(const Image& image) const {
  if (image.width != input_size_ || image.height != input_size_ || image.channels != 3) {
    throw Error(ErrorKind::Shape, "portable model expects " + std::to_string(input_size_) + "x" +
                                      std::to_string(input_size_) + "x3 input");
  }
  Act x{3, image.height, image.width, {}};
  x.v.resize(static_cast<std::size_t>(3) * x.h * x.w);
  for (int y = 0; y < x.h; ++y) {
    for (int xx = 0; xx < x.w; ++xx) {
      for (int c = 0; c < 3; ++c) x.v[(static_cast<std::size_t>(c) * x.h + y) * x.w + xx] = image.at(xx, y, c);
    }
  }

  for (const Op& op : ops_) {
    switch (op.kind) {
      case Op::Kind::AvgPool: {
        Act o{x.c, (x.h - op.a) / op.stride + 1, (x.w - op.a) / op.stride + 1, {}};
        o.v.assign(static_cast<std::size_t>(o.c) * o.h * o.w, 0.0f);
        const float scale = 1.0f / static_cast<float>(op.a * op.a);
        for (int c = 0; c < o.c; ++c) {
          for (int oy = 0; oy < o.h; ++oy) {
            for (int ox = 0; ox < o.w; ++ox) {
              float s = 0.0f;
              for (int dy = 0; dy < op.a; ++dy) {
                const float* row = &x.v[(static_cast<std::size_t>(c) * x.h + oy * op.stride + dy) * x.w + ox * op.stride];
                for (int dx = 0; dx < op.a; ++dx) s += row[dx];
              }
              o.v[(static_cast<std::size_t>(c) * o.h + oy) * o.w + ox] = s * scale;
            }
          }
        }
        x = std::move(o);
        break;
      }
      case Op::Kind::Conv: {
        if (x.c != op.a) throw Error(ErrorKind::Shape, "conv2d channel mismatch in artifact");
        const int k = op.kernel, s = op.stride, p = op.padding;
        Act o{op.b, (x.h + 2 * p - k) / s + 1, (x.w + 2 * p - k) / s + 1, {}};
        o.v.resize(static_cast<std::size_t>(o.c) * o.h * o.w);
        const float* w = &blob_[op.weights];
        const float* bias = &blob_[op.bias];
        for (int oc = 0; oc < o.c; ++oc) {
          for (int oy = 0; oy < o.h; ++oy) {
            for (int ox = 0; ox < o.w; ++ox) {
              float acc = bias[oc];
              for (int ic = 0; ic < x.c; ++ic) {
                const float* wk = w + ((static_cast<std::size_t>(oc) * x.c + ic) * k) * k;
                for (int ky = 0; ky < k; ++ky) {
                  const int iy = oy * s + ky - p;
                  if (iy < 0 || iy >= x.h) continue;
                  for (int kx = 0; kx < k; ++kx) {
                    const int ix = ox * s + kx - p;
                    if (ix < 0 || ix >= x.w) continue;
                    acc += wk[ky * k + kx] * x.v[(static_cast<std::size_t>(ic) * x.h + iy) * x.w + ix];
                  }
                }
              }
              o.v[(static_cast<std::size_t>(oc) * o.h + oy) * o.w + ox] = acc;
            }
          }
        }
        x = std::move(o);
        break;
      }
      case Op::Kind::Relu:
        for (float& v : x.v) v = v > 0.0f ? v : 0.0f;
        break;
      case Op::Kind::GlobalAvgMax: {
        Act o{2 * x.c, 1, 1, std::vector<float>(static_cast<std::size_t>(2) * x.c)};
        const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
        for (int c = 0; c < x.c; ++c) {
          const float* q = &x.v[c * plane];
          double sum = 0.0;
          float best = q[0];
          for (std::size_t i = 0; i < plane; ++i) {
            sum += q[i];
            best = std::max(best, q[i]);
          }
          o.v[static_cast<std::size_t>(c)] = static_cast<float>(sum / static_cast<double>(plane));
          o.v[static_cast<std::size_t>(x.c + c)] = best;
        }
        x = std::move(o);
        break;
      }
      case Op::Kind::Dense: {
        if (x.v.size() != static_cast<std::size_t>(op.a)) {
          throw Error(ErrorKind::Shape, "dense input size mismatch in artifact");
        }
        Act o{op.b, 1, 1, std::vector<float>(blob_.begin() + static_cast<std::ptrdiff_t>(op.bias),
                                             blob_.begin() + static_cast<std::ptrdiff_t>(op.bias + op.b))};
        const float* w = &blob_[op.weights];
        for (int i = 0; i < op.a; ++i) {
          const float xi = x.v[static_cast<std::size_t>(i)];
          if (xi == 0.0f) continue;
          const float* row = w + static_cast<std::size_t>(i) * op.b;
          for (int j = 0; j < op.b; ++j) o.v[static_cast<std::size_t>(j)] += xi * row[j];
        }
        x = std::move(o);
        break;
      }
      case Op::Kind::Softmax: {
        const float top = *std::max_element(x.v.begin(), x.v.end());
        float sum = 0.0f;
        for (float& v : x.v) {
          v = std::exp(v - top);
          sum += v;
        }
        for (float& v : x.v) v /= sum;
        break;
      }
    }
  }
  if (x.v.size() != class_ids_.size()) {
    throw Error(ErrorKind::Shape, "artifact output size differs from its class list");
  }
  return x.v;
}

// ---------------------------------------------------------------- latency

std::string hardware_descriptor() {
  std::string model_name;
  std::ifstream cpuinfo("/proc/cpuinfo");
  std::string line;
  while (std::getline(cpuinfo, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) model_name = line.substr(colon + 2);
      break;
    }
  }
  if (model_name.empty()) model_name = "unknown cpu";
  return model_name + ", " + std::to_string(std::max(1u, std::thread::hardware_concurrency())) +
         " hardware threads, single-threaded float32 runtime";
}

LatencyReport benchmark_latency(const PortableModel& model, int n_runs, int warmup,
                                std::uint64_t seed) {
  if (n_runs < 30 || warmup < 5) {
    throw Error(ErrorKind::Parameter, "latency benchmark needs n_runs >= 30 and warmup >= 5");
  }
  Rng rng(seed);
  Image input(model.input_size(), model.input_size(), 3);
  for (float& v : input.data) v = static_cast<float>(rng.uniform());

  LatencyReport report;
  report.warmup = warmup;
  report.hardware = hardware_descriptor();
  volatile float sink = 0.0f;
  for (int i = 0; i < warmup; ++i) sink = sink + model.predict(input)[0];
  report.samples_ms.reserve(static_cast<std::size_t>(n_runs));
  for (int i = 0; i < n_runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto p = model.predict(input);
    const auto t1 = std::chrono::steady_clock::now();
    sink = sink + p[0];
    report.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::vector<double> sorted = report.samples_ms;
  std::sort(sorted.begin(), sorted.end());
  report.median_ms = sorted_quantile(sorted, 0.5);
  report.p95_ms = sorted_quantile(sorted, 0.95);
  return report;
}

std::string latency_to_json(const LatencyReport& report) {
  json j = {{"format", "vasc-latency"},
            {"version", 1},
            {"n_runs", report.samples_ms.size()},
            {"warmup", report.warmup},
            {"median_ms", report.median_ms},
            {"p95_ms", report.p95_ms},
            {"hardware", report.hardware},
            {"samples_ms", report.samples_ms}};
  return j.dump(2);
}

}  // namespace vasc
