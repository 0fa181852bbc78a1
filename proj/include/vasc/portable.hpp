#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vasc/image.hpp"
#include "vasc/model.hpp"

namespace vasc {

// Portable artifact layout (all integers little-endian):
//
//   8 bytes   magic "VASCPRT1"
//   u64       header length H
//   H bytes   JSON header: input geometry, class ids, op list with blob offsets
//   u64       blob length B (a multiple of 4)
//   B bytes   float32 parameters
//   u64       FNV-1a 64 of every preceding byte
//
// Supported ops: avgpool2d, conv2d, relu, global_avg_max_pool, dense, softmax.
// Dropout is an identity at inference and is not written.

struct ExportSummary {
  std::filesystem::path path;
  std::uintmax_t bytes = 0;
  std::vector<std::string> ops;
  std::string checksum;
};

/// Error{Export} naming every layer the format cannot express.
ExportSummary export_portable(const Classifier& model, const std::filesystem::path& path);

/// Float32 inference runtime for the portable format. It shares no code with
/// the training-side layers.
class PortableModel {
 public:
  /// Error{Load} on a short, corrupt or unrecognized file.
  static PortableModel load(const std::filesystem::path& path);
  static PortableModel parse(const std::string& bytes);

  int input_size() const { return input_size_; }
  const std::vector<std::string>& class_ids() const { return class_ids_; }
  std::vector<std::string> op_names() const;

  /// Image must be input_size x input_size x 3, values in [0, 1].
  std::vector<float> predict(const Image& image) const;

  struct Op;

 private:
  int input_size_ = 0;
  std::vector<std::string> class_ids_;
  std::vector<Op> ops_;
  std::vector<float> blob_;

  PortableModel();

 public:
  ~PortableModel();
  PortableModel(PortableModel&&) noexcept;
  PortableModel& operator=(PortableModel&&) noexcept;
};

struct LatencyReport {
  std::vector<double> samples_ms;
  double median_ms = 0.0;
  double p95_ms = 0.0;
  int warmup = 0;
  std::string hardware;
};

/// Batch-1 wall time from tensor in to probabilities out. Error{Parameter}
/// unless n_runs >= 30 and warmup >= 5.
LatencyReport benchmark_latency(const PortableModel& model, int n_runs = 100, int warmup = 10,
                                std::uint64_t seed = 3);

std::string hardware_descriptor();
std::string latency_to_json(const LatencyReport& report);

}  // namespace vasc
