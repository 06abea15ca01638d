#pragma once

// Narrative records (JSONL), region feature files (binary), the synthetic
// dataset generator, and conversion to model-ready examples.
//
// Narrative JSONL, one object per line:
//   {"image_id": "...", "caption": ["a", "dog"] | "a dog",
//    "trace_points": [[x, y, t], ...], "word_timings": [["a", t0, t1], ...],
//    "features_key": "...", "image_width": W?, "image_height": H?}
// When image_width/image_height are present the point coordinates are in
// pixels and are divided by them on load.
//
// Feature file, little-endian:
//   magic "MITRFEAT" (8 bytes), u32 version = 1, u32 d_visual,
//   then until end of file, per image:
//     u32 id length + id bytes, u32 region count, count x d_visual f32 values.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mitr/tensor.hpp"
#include "mitr/trace.hpp"
#include "mitr/vocab.hpp"

namespace mitr {

struct NarrativeRecord {
  std::string image_id;
  std::vector<std::string> caption;
  std::vector<TracePoint> trace_points;
  std::vector<WordTiming> word_timings;
  std::string features_key;

  friend bool operator==(const NarrativeRecord&, const NarrativeRecord&) = default;
};

// Throws DataError naming the line and offending fields of the first bad record.
std::vector<NarrativeRecord> parse_narratives(std::string_view text,
                                              std::vector<std::string>* warnings = nullptr);
std::vector<NarrativeRecord> load_narratives(const std::string& path,
                                             std::vector<std::string>* warnings = nullptr);
std::string narratives_to_jsonl(std::span<const NarrativeRecord> records);
void write_narratives(const std::string& path, std::span<const NarrativeRecord> records);

inline constexpr char kFeatureMagic[8] = {'M', 'I', 'T', 'R', 'F', 'E', 'A', 'T'};
inline constexpr std::uint32_t kFeatureVersion = 1;

struct FeatureFile {
  std::size_t d_visual = 0;
  std::map<std::string, Tensor> features;  // regions x d_visual, widened to double

  friend bool operator==(const FeatureFile&, const FeatureFile&) = default;
};

FeatureFile parse_region_features(std::string_view bytes);
FeatureFile load_region_features(const std::string& path);
// Values are narrowed to 32-bit floats.
std::string serialize_region_features(const FeatureFile& file);
void save_region_features(const std::string& path, const FeatureFile& file);

struct SynthSpec {
  std::size_t num_types = 5;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  std::size_t noise_dims = 2;
  std::size_t records = 256;
  double feature_noise = 0.05;
  std::uint64_t seed = 0;

  std::size_t d_visual() const { return num_types + 5 + noise_dims; }
};

struct SynthData {
  std::vector<NarrativeRecord> records;
  FeatureFile features;
  std::vector<std::string> type_words;
};

inline constexpr std::string_view kSynthPrefix[] = {"we", "see"};

// Images of 1..3 typed objects. Captions read the prefix and then one type
// word per object in a random order; the trace of every type word covers
// exactly its object's box and prefix words carry no trace points.
SynthData synth_dataset(const SynthSpec& spec);

// Model-ready record: caption ids and trace both end with the END position
// (END token, whole-image box).
struct Example {
  std::string image_id;
  Tensor regions;
  std::vector<int> caption;
  AlignedTrace trace;

  std::span<const int> words() const { return {caption.data(), caption.size() - 1}; }
  AlignedTrace word_trace() const { return AlignedTrace(trace.begin(), trace.end() - 1); }
};

// Sorted distinct caption tokens after the special tokens.
Vocabulary build_vocabulary(std::span<const NarrativeRecord> records);

std::vector<Example> make_examples(std::span<const NarrativeRecord> records,
                                   const FeatureFile& features, const Vocabulary& vocab);

}  // namespace mitr
