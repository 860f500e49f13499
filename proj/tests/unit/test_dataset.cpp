#include <doctest.h>

#include "m2m/core/error.hpp"
#include "m2m/data/dataset.hpp"
#include "support.hpp"

using namespace m2m;

namespace {

std::vector<Phrase> random_phrases(std::size_t n, std::uint64_t seed) {
  std::vector<Phrase> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({test::random_roll(Dims{}, 0.05, seed + i), "song_" + std::to_string(i / 2) + ".mid",
                   static_cast<std::uint32_t>(i % 2)});
  }
  return out;
}

}  // namespace

TEST_CASE("hand-assembled bytes for a tiny phrase") {
  Pianoroll r(Dims{2, 3, 1});
  r.set(0, 0, 0);
  r.set(1, 2, 0);  // cells 100001 -> 1000 0100
  const std::vector<Phrase> ph{{r, "ab", 7}};
  const std::vector<std::uint8_t> want = {'M', '2', 'M', '1', 1, 0, 2, 0, 0, 0, 3, 0, 0, 0, 1, 0, 0, 0,
                                          1,   0,   0,   0,   0, 0, 0, 0, 2, 0, 'a', 'b', 7, 0, 0, 0, 0x84};
  CHECK(encode_dataset(ph, Dims{2, 3, 1}) == want);
  CHECK(decode_dataset(want) == ph);
}

TEST_CASE("save and load round trip") {
  auto dir = test::scratch_dir("dataset");
  const auto phrases = random_phrases(3, 11);
  const auto path = (dir / "three.m2m").string();
  save_dataset(phrases, path);
  const auto back = load_dataset(path);
  CHECK(back == phrases);
  for (std::size_t i = 0; i < phrases.size(); ++i) {
    CHECK(mixture_from_roll(back[i].roll) == mixture_from_roll(phrases[i].roll));
  }

  save_dataset({}, (dir / "empty.m2m").string());
  CHECK(load_dataset((dir / "empty.m2m").string()).empty());
  CHECK(encode_dataset({}).size() == 4 + 2 + 12 + 8);
}

TEST_CASE("corrupt files fail without partial results") {
  const auto bytes = encode_dataset(random_phrases(3, 5));
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{17}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    CAPTURE(cut);
    CHECK_THROWS_AS(decode_dataset(part), ParseError);
  }
  auto bad = bytes;
  bad[4] = 9;
  CHECK_THROWS_AS(decode_dataset(bad), ParseError);
  bad = bytes;
  bad[1] = 'X';
  CHECK_THROWS_AS(decode_dataset(bad), ParseError);
  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_AS(decode_dataset(bad), ParseError);

  try {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + 100);
    decode_dataset(part);
  } catch (const ParseError& e) {
    CHECK(e.offset() <= 100);
  }
}

TEST_CASE("manifests cover their phrases and survive formatting") {
  const auto phrases = random_phrases(6, 2);
  auto m = build_manifest(phrases, Split::Valid);
  CHECK(m.phrase_count == 6);
  REQUIRE(m.sources.size() == 3);
  CHECK(m.sources[1] == SourceRange{"song_1.mid", 2, 4});
  CHECK(manifest_is_consistent(m));
  auto empty = build_manifest({}, Split::Test);
  CHECK(manifest_is_consistent(empty));

  const std::vector<DatasetManifest> all{build_manifest(phrases, Split::Train), m, empty};
  CHECK(parse_manifests(format_manifests(all)) == all);

  auto broken = m;
  broken.sources[1].end = 5;
  CHECK_FALSE(manifest_is_consistent(broken));
}

TEST_CASE("splits keep sources whole and are seed-determined") {
  std::vector<std::string> ids;
  for (int i = 0; i < 100; ++i) ids.push_back("f" + std::to_string(i));
  const auto a = assign_splits(ids, {90, 5, 5}, 3);
  const auto b = assign_splits(ids, {90, 5, 5}, 3);
  CHECK(a == b);
  int counts[3] = {0, 0, 0};
  for (const auto& [id, s] : a) ++counts[static_cast<int>(s)];
  CHECK(counts[0] == 90);
  CHECK(counts[1] == 5);
  CHECK(counts[2] == 5);
  CHECK(assign_splits(ids, {90, 5, 5}, 4) != a);

  const auto small = assign_splits({"x", "y", "z"}, {90, 5, 5}, 0);
  int small_counts[3] = {0, 0, 0};
  for (const auto& [id, s] : small) ++small_counts[static_cast<int>(s)];
  CHECK(small_counts[0] == 1);
  CHECK(small_counts[1] == 1);
  CHECK(small_counts[2] == 1);
  CHECK_THROWS_AS(assign_splits(ids, {90, 5, 6}, 0), ConfigError);
}
