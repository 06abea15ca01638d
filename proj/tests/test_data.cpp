#include <doctest.h>

#include <cstdio>
#include <cstring>

#include "mitr/checkpoint.hpp"
#include "mitr/data.hpp"
#include "mitr/error.hpp"
#include "mitr/lbm.hpp"

using namespace mitr;

namespace {

const char* kRecord =
    R"({"image_id":"img1","caption":"A dog, sleeps.","trace_points":[[0.1,0.2,0.5],[0.3,0.4,0.7],[0.6,0.6,1.5]],)"
    R"("word_timings":[["a",0.0,0.4],["dog",0.4,1.0],["sleeps",1.0,2.0]],"features_key":"f1"})";

void append_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_f32(std::string& s, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  append_u32(s, bits);
}

// One image "img", 3 regions of width 4, values 0.5 * (r * 4 + c).
std::string feature_fixture() {
  std::string s = "MITRFEAT";
  append_u32(s, 1);
  append_u32(s, 4);
  append_u32(s, 3);
  s += "img";
  append_u32(s, 3);
  for (int i = 0; i < 12; ++i) append_f32(s, 0.5f * static_cast<float>(i));
  return s;
}

}  // namespace

TEST_CASE("narrative parsing and tokenization") {
  const auto recs = parse_narratives(kRecord);
  REQUIRE(recs.size() == 1);
  const NarrativeRecord& r = recs[0];
  CHECK(r.image_id == "img1");
  CHECK(r.caption == std::vector<std::string>{"a", "dog", "sleeps"});
  CHECK(r.features_key == "f1");
  CHECK(r.trace_points.size() == 3);
  CHECK(r.word_timings[1] == WordTiming{"dog", 0.4, 1.0});
}

TEST_CASE("narrative round trip") {
  const SynthData d = synth_dataset({.records = 12, .seed = 4});
  const std::string text = narratives_to_jsonl(d.records);
  CHECK(parse_narratives(text) == d.records);
  std::vector<NarrativeRecord> one = parse_narratives(kRecord);
  CHECK(parse_narratives(narratives_to_jsonl(one)) == one);
}

TEST_CASE("empty input yields no records and a warning") {
  std::vector<std::string> warnings;
  CHECK(parse_narratives("", &warnings).empty());
  CHECK(warnings.size() == 1);
  warnings.clear();
  CHECK(parse_narratives("\n  \n", &warnings).empty());
  CHECK(warnings.size() == 1);
}

TEST_CASE("invalid records are rejected with line and field") {
  auto message = [](const std::string& text) {
    try {
      parse_narratives(text);
    } catch (const DataError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  const std::string overlap =
      R"({"image_id":"i","caption":"a b","trace_points":[],"word_timings":[["a",0,1],["b",0.5,2]],"features_key":"f"})";
  const std::string m1 = message(std::string(kRecord) + "\n" + overlap);
  CHECK(m1.find("line 2") != std::string::npos);
  CHECK(m1.find("overlaps") != std::string::npos);

  const std::string missing = R"({"image_id":"i","caption":"a","trace_points":[]})";
  const std::string m2 = message(missing);
  CHECK(m2.find("word_timings") != std::string::npos);
  CHECK(m2.find("features_key") != std::string::npos);

  CHECK(message("{not json").find("malformed") != std::string::npos);
  const std::string mismatch =
      R"({"image_id":"i","caption":"a b","trace_points":[],"word_timings":[["a",0,1]],"features_key":"f"})";
  CHECK(message(mismatch).find("word_timings") != std::string::npos);
  const std::string unsorted =
      R"({"image_id":"i","caption":"a","trace_points":[[0.1,0.1,1],[0.2,0.2,0.5]],"word_timings":[["a",0,2]],"features_key":"f"})";
  CHECK(message(unsorted).find("sorted") != std::string::npos);
}

TEST_CASE("pixel coordinates are normalized by image size") {
  const std::string rec =
      R"({"image_id":"i","caption":"a","trace_points":[[320,120,0.1],[640,480,0.2]],"word_timings":[["a",0,1]],)"
      R"("features_key":"f","image_width":640,"image_height":480})";
  const auto r = parse_narratives(rec)[0];
  CHECK(r.trace_points[0].x == 0.5);
  CHECK(r.trace_points[0].y == 0.25);
  CHECK(r.trace_points[1].x == 1.0);
  CHECK(r.trace_points[1].y == 1.0);
  const std::string only_width =
      R"({"image_id":"i","caption":"a","trace_points":[],"word_timings":[["a",0,1]],"features_key":"f","image_width":640})";
  CHECK_THROWS_AS(parse_narratives(only_width), DataError);
}

TEST_CASE("feature file fixture") {
  const FeatureFile f = parse_region_features(feature_fixture());
  CHECK(f.d_visual == 4);
  REQUIRE(f.features.size() == 1);
  const Tensor& t = f.features.at("img");
  CHECK(t.rows() == 3);
  CHECK(t.cols() == 4);
  CHECK(t(2, 3) == 5.5);
  CHECK(serialize_region_features(f) == feature_fixture());
}

TEST_CASE("feature file errors") {
  const std::string good = feature_fixture();
  for (std::size_t cut : {good.size() - 1, good.size() - 4, std::size_t{20}, std::size_t{10}, std::size_t{3}}) {
    CHECK_THROWS_AS(parse_region_features(good.substr(0, cut)), DataError);
  }
  std::string magic = good;
  magic[4] = 'X';
  CHECK_THROWS_AS(parse_region_features(magic), DataError);
  std::string version = good;
  version[8] = 2;
  CHECK_THROWS_AS(parse_region_features(version), DataError);
}

TEST_CASE("feature file round trip is bit-identical") {
  const SynthData d = synth_dataset({.records = 20, .seed = 9});
  const std::string bytes = serialize_region_features(d.features);
  const FeatureFile back = parse_region_features(bytes);
  CHECK(serialize_region_features(back) == bytes);
  const FeatureFile again = parse_region_features(serialize_region_features(back));
  CHECK(again == back);
  const std::string path = "test_data_features.bin";
  save_region_features(path, back);
  CHECK(load_region_features(path) == back);
  std::remove(path.c_str());
}

TEST_CASE("synthetic data is deterministic and aligned") {
  const SynthSpec spec{.num_types = 4, .min_objects = 1, .max_objects = 3, .records = 40, .seed = 17};
  const SynthData a = synth_dataset(spec), b = synth_dataset(spec);
  CHECK(a.records == b.records);
  CHECK(a.features == b.features);
  SynthSpec other = spec;
  other.seed = 18;
  CHECK_FALSE(synth_dataset(other).records == a.records);

  const Vocabulary vocab = build_vocabulary(a.records);
  const auto examples = make_examples(a.records, a.features, vocab);
  for (const Example& ex : examples) {
    CHECK(ex.caption.size() == ex.trace.size());
    for (const TraceBox& box : ex.trace) CHECK(valid_box(box, 1e-9));
  }

  // Oracle: a type word is mapped to the box stored next to its type's one-hot.
  double worst = 0.0;
  for (std::size_t n = 0; n < a.records.size(); ++n) {
    const NarrativeRecord& r = a.records[n];
    const Tensor& regions = a.features.features.at(r.features_key);
    AlignedTrace oracle;
    for (const std::string& w : r.caption) {
      std::size_t type = spec.num_types;
      for (std::size_t k = 0; k < spec.num_types; ++k)
        if (a.type_words[k] == w) type = k;
      if (type == spec.num_types) {
        oracle.push_back(TraceBox::whole_image());
        continue;
      }
      std::size_t best = 0;
      for (std::size_t o = 1; o < regions.rows(); ++o)
        if (regions(o, type) > regions(best, type)) best = o;
      const std::size_t c = spec.num_types;
      oracle.push_back({regions(best, c), regions(best, c + 1), regions(best, c + 2),
                        regions(best, c + 3), regions(best, c + 4)});
    }
    worst = std::max(worst, lbm_score(examples[n].word_trace(), oracle, 0));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("synth and example errors") {
  CHECK_THROWS_AS(synth_dataset({.num_types = 1}), UsageError);
  CHECK_THROWS_AS(synth_dataset({.num_types = 3, .min_objects = 2, .max_objects = 1}), UsageError);
  CHECK_THROWS_AS(synth_dataset({.num_types = 6, .max_objects = 5}), UsageError);
  const auto recs = parse_narratives(kRecord);
  CHECK_THROWS_AS(make_examples(recs, FeatureFile{}, build_vocabulary(recs)), DataError);
}

TEST_CASE("vocabulary") {
  const auto recs = parse_narratives(kRecord);
  const Vocabulary v = build_vocabulary(recs);
  CHECK(v.size() == 7);
  CHECK(v.id("a") == 4);
  CHECK(v.id("sleeps") == 6);
  CHECK(v.id("zebra") == Vocabulary::kUnk);
  const std::vector<int> ids{Vocabulary::kBos, 5, 6, Vocabulary::kEnd, 4};
  CHECK(v.decode(ids) == std::vector<std::string>{"dog", "sleeps"});
}
