#include "doctest.h"
#include "vasc/error.hpp"
#include "vasc/taxonomy.hpp"

using namespace vasc;

TEST_CASE("bundled taxonomy") {
  const Taxonomy t = default_taxonomy();
  CHECK(t.size() == 12);
  const Taxonomy six = t.subset_six();
  REQUIRE(six.size() == 6);
  CHECK(six[0].class_id == "hemangioma");
  CHECK(six.index_of("nevus").has_value());
  CHECK_FALSE(six.index_of("no_such_class").has_value());
  CHECK_THROWS_AS(six.require_index("no_such_class"), Error);
}

TEST_CASE("label resolution normalizes case and whitespace") {
  const Taxonomy t = default_taxonomy();
  CHECK(t.resolve_label("Infantile   Hemangioma") == "hemangioma");
  CHECK(t.resolve_label("  PORT-WINE stain ") == "capillary_malformation");
  CHECK(t.resolve_label("lobular capillary hemangioma") == "pyogenic_granuloma");
  try {
    (void)t.resolve_label("melanoma of the moon");
    FAIL("expected an unmapped label");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::UnmappedLabel);
  }
}

TEST_CASE("label resolution applies NFC") {
  const std::string text =
      "version = t/1\n[class cafe]\ndisplay_name = Cafe\nsubtypes = caf\xC3\xA9 spot\n";
  const Taxonomy t = parse_taxonomy(text);
  // "e" followed by a combining acute accent.
  CHECK(t.resolve_label("Cafe\xCC\x81 Spot") == "cafe");
}

TEST_CASE("ambiguous subtypes are rejected") {
  const std::string text =
      "version = t/1\n"
      "[class a]\ndisplay_name = A\nsubtypes = shared\n"
      "[class b]\ndisplay_name = B\nsubtypes = Shared\n";
  try {
    (void)parse_taxonomy(text);
    FAIL("expected ambiguity");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Ambiguity);
  }
}

TEST_CASE("duplicate class ids are rejected") {
  const std::string text =
      "version = t/1\n[class a]\ndisplay_name = A\nsubtypes = x\n[class a]\ndisplay_name = A\nsubtypes = y\n";
  CHECK_THROWS_AS(parse_taxonomy(text), Error);
}

TEST_CASE("text round trip") {
  const Taxonomy t = default_taxonomy();
  CHECK(parse_taxonomy(t.to_text()) == t);
  CHECK(parse_taxonomy(t.subset_six().to_text()) == t.subset_six());
}
