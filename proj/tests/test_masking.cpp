#include <catch_amalgamated.hpp>

#include <fstream>

#include "support.hpp"

using namespace ddl;
using testing::TempDir;

TEST_CASE("load_tracks", "[masking]") {
  TempDir dir("tracks");
  std::ofstream(dir / "empty.jsonl").close();
  const auto e = load_tracks(dir / "empty.jsonl", 8, 8, 4);
  for (std::size_t f = 0; f < 4; ++f) CHECK(e.at(f).empty());

  std::ofstream(dir / "a.jsonl") << R"({"frame": 0, "object_id": 0, "box": [-2, 0, 5, 5]})" << '\n'
                                  << R"({"frame": 0, "object_id": 1, "box": [1, 1, 9, 3]})" << '\n';
  const auto a = load_tracks(dir / "a.jsonl", 8, 8);
  REQUIRE(a.at(0).size() == 2);
  CHECK(a.at(0)[0].box == Box{0, 0, 5, 5});
  CHECK(a.at(0)[1].box == Box{1, 1, 8, 3});

  std::ofstream(dir / "bad.jsonl") << "{\"frame\": 0, \"object_id\": \n";
  CHECK_THROWS_AS(load_tracks(dir / "bad.jsonl", 8, 8), IngestError);
  std::ofstream(dir / "neg.jsonl") << R"({"frame": 0, "object_id": -1, "box": [0, 0, 1, 1]})" << '\n';
  CHECK_THROWS_AS(load_tracks(dir / "neg.jsonl", 8, 8), IngestError);
  std::ofstream(dir / "short.jsonl") << R"({"frame": 0, "object_id": 1, "box": [0, 0, 1]})" << '\n';
  CHECK_THROWS_AS(load_tracks(dir / "short.jsonl", 8, 8), IngestError);
}

TEST_CASE("full-frame fallback", "[masking]") {
  const auto m = full_frame_fallback({1, 3, 4, 4});
  CHECK(m.support() == 48);
  CHECK_FALSE(m.object_id.has_value());
  const auto c3 = full_frame_fallback({3, 3, 4, 4});
  CHECK(c3.support() == 3 * 3 * 16);
}

TEST_CASE("random object mask", "[masking]") {
  TrackedObjectSet whole(4, 4, 3);
  for (std::size_t f = 0; f < 3; ++f) whole.add(f, 5, Box{0, 0, 4, 4});
  Rng rng(1);
  const auto all = random_object_mask(whole, 0, 3, 1, rng);
  CHECK(all.support() == 48);
  CHECK(all.object_id == 5);

  TrackedObjectSet none(4, 4, 6);
  Rng r1(2), r2(2);
  const auto fb = random_object_mask(none, 2, 3, 2, r1);
  CHECK_FALSE(fb.object_id.has_value());
  CHECK(fb.support() == 2 * 3 * 16);
  CHECK(r1 == r2);  // no draw consumed
}

TEST_CASE("chosen object replays the generator and masks only its boxes", "[masking]") {
  TrackedObjectSet tracks(10, 10, 5);
  for (std::size_t f = 0; f < 5; ++f) {
    tracks.add(f, 3, Box{0, 0, 3, 3});
    if (f != 2) tracks.add(f, 8, Box{static_cast<int>(f), 5, static_cast<int>(f) + 4, 9});
  }
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed), replay(seed);
    const auto m = random_object_mask(tracks, 1, 3, 2, rng);
    const int expect = std::vector<int>{3, 8}[replay.below(2)];
    REQUIRE(m.object_id == expect);
    // Independent rasterization of the chosen object's boxes.
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t t = 0; t < 3; ++t)
        for (int y = 0; y < 10; ++y)
          for (int x = 0; x < 10; ++x) {
            bool inside = false;
            for (const auto& tb : tracks.at(1 + t))
              if (tb.object_id == expect && tb.box.contains(x, y)) inside = true;
            REQUIRE(m.mask(c, t, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) == (inside ? 1 : 0));
          }
  }
}

TEST_CASE("masks are binary, idempotent and replicated over channels", "[masking][property]") {
  TempDir dir("mask_prop");
  const auto m = synth_dataset(testing::tiny_synth(), 4, dir.path());
  const auto tracks = load_tracks(m.path_of(m.train[0].tracks), m.height, m.width, m.train[0].frames);
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t start = rng.below(m.train[0].frames - 3);
    const auto ms = random_object_mask(tracks, start, 3, 3, rng);
    const std::size_t plane = 3 * m.height * m.width;
    for (std::size_t i = 0; i < ms.mask.size(); ++i) {
      const auto v = ms.mask[i];
      REQUIRE((v == 0 || v == 1));
      REQUIRE(v * v == v);
      REQUIRE(ms.mask[i % plane] == v);
    }
    // support within the union of the selected object's boxes in the raw track file
    REQUIRE(ms.object_id.has_value());
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t y = 0; y < m.height; ++y)
        for (std::size_t x = 0; x < m.width; ++x) {
          if (!ms.mask(0, t, y, x)) continue;
          bool covered = false;
          for (const auto& tb : tracks.at(start + t))
            covered = covered || (tb.object_id == *ms.object_id &&
                                  tb.box.contains(static_cast<int>(x), static_cast<int>(y)));
          REQUIRE(covered);
        }
  }
}

TEST_CASE("selection frequency is uniform over present ids", "[masking][property]") {
  const int k = 4;
  TrackedObjectSet tracks(8, 8, 3);
  for (std::size_t f = 0; f < 3; ++f)
    for (int id = 0; id < k; ++id) tracks.add(f, id * 10, Box{id, id, id + 2, id + 2});
  Rng rng(2024);
  std::map<int, int> counts;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) ++counts[*random_object_mask(tracks, 0, 3, 1, rng).object_id];
  REQUIRE(counts.size() == static_cast<std::size_t>(k));
  for (const auto& [id, n] : counts) CHECK(std::abs(static_cast<double>(n) / draws - 1.0 / k) <= 0.02);
}
