#include "mitr/data.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mitr/binary_io.hpp"
#include "mitr/checkpoint.hpp"
#include "mitr/error.hpp"
#include "mitr/metrics.hpp"
#include "mitr/rng.hpp"

namespace mitr {

using nlohmann::json;

namespace {

std::string normalize_token(const std::string& raw) {
  const Tokens t = tokenize(raw);
  std::string out;
  for (const auto& part : t) {
    out += part;
  }
  return out;
}

NarrativeRecord parse_record(const json& j, std::size_t line) {
  const std::string where = "narratives line " + std::to_string(line);
  if (!j.is_object()) {
    throw DataError(where + ": record is not a JSON object");
  }
  std::vector<std::string> bad;
  auto check = [&](const char* field, bool ok) {
    if (!ok) {
      bad.emplace_back(field);
    }
  };
  check("image_id", j.contains("image_id") && j["image_id"].is_string());
  check("caption", j.contains("caption") && (j["caption"].is_string() || j["caption"].is_array()));
  check("trace_points", j.contains("trace_points") && j["trace_points"].is_array());
  check("word_timings", j.contains("word_timings") && j["word_timings"].is_array());
  check("features_key", j.contains("features_key") && j["features_key"].is_string());
  for (const char* dim : {"image_width", "image_height"}) {
    if (j.contains(dim)) {
      check(dim, j[dim].is_number() && j[dim].get<double>() > 0.0);
    }
  }
  if (j.contains("image_width") != j.contains("image_height")) {
    bad.emplace_back("image_width/image_height");
  }

  NarrativeRecord r;
  if (bad.empty()) {
    r.image_id = j["image_id"].get<std::string>();
    r.features_key = j["features_key"].get<std::string>();
    if (j["caption"].is_string()) {
      r.caption = tokenize(j["caption"].get<std::string>());
    } else {
      for (const auto& tok : j["caption"]) {
        if (!tok.is_string()) {
          bad.emplace_back("caption");
          break;
        }
        r.caption.push_back(normalize_token(tok.get<std::string>()));
      }
    }
    const double w = j.contains("image_width") ? j["image_width"].get<double>() : 1.0;
    const double h = j.contains("image_height") ? j["image_height"].get<double>() : 1.0;
    for (const auto& p : j["trace_points"]) {
      if (!p.is_array() || p.size() != 3 || !p[0].is_number() || !p[1].is_number() ||
          !p[2].is_number()) {
        bad.emplace_back("trace_points");
        break;
      }
      r.trace_points.push_back({p[0].get<double>() / w, p[1].get<double>() / h, p[2].get<double>()});
    }
    for (const auto& t : j["word_timings"]) {
      if (!t.is_array() || t.size() != 3 || !t[0].is_string() || !t[1].is_number() ||
          !t[2].is_number()) {
        bad.emplace_back("word_timings");
        break;
      }
      r.word_timings.push_back(
          {normalize_token(t[0].get<std::string>()), t[1].get<double>(), t[2].get<double>()});
    }
  }
  if (!bad.empty()) {
    std::string msg = where + ": invalid or missing field(s):";
    for (const auto& b : bad) {
      msg += " " + b;
    }
    throw DataError(msg);
  }

  if (r.caption.empty()) {
    throw DataError(where + ": caption: empty");
  }
  for (std::size_t i = 0; i < r.trace_points.size(); ++i) {
    const TracePoint& p = r.trace_points[i];
    if (!(p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0 && p.t >= 0.0)) {
      throw DataError(where + ": trace_points[" + std::to_string(i) +
                      "]: outside the normalized image or negative time");
    }
    if (i > 0 && p.t < r.trace_points[i - 1].t) {
      throw DataError(where + ": trace_points: not sorted by time at index " + std::to_string(i));
    }
  }
  if (r.word_timings.size() != r.caption.size()) {
    throw DataError(where + ": word_timings: " + std::to_string(r.word_timings.size()) +
                    " timings for " + std::to_string(r.caption.size()) + " caption tokens");
  }
  for (std::size_t i = 0; i < r.word_timings.size(); ++i) {
    const WordTiming& t = r.word_timings[i];
    if (t.token != r.caption[i]) {
      throw DataError(where + ": word_timings[" + std::to_string(i) + "]: token '" + t.token +
                      "' does not match caption token '" + r.caption[i] + "'");
    }
    if (!(t.t_start >= 0.0 && t.t_start <= t.t_end)) {
      throw DataError(where + ": word_timings[" + std::to_string(i) + "]: invalid interval");
    }
    if (i > 0 && t.t_start < r.word_timings[i - 1].t_end) {
      throw DataError(where + ": word_timings[" + std::to_string(i) +
                      "]: overlaps the previous word");
    }
  }
  return r;
}

json record_to_json(const NarrativeRecord& r) {
  json j;
  j["image_id"] = r.image_id;
  j["caption"] = r.caption;
  json points = json::array();
  for (const auto& p : r.trace_points) {
    points.push_back({p.x, p.y, p.t});
  }
  j["trace_points"] = std::move(points);
  json timings = json::array();
  for (const auto& t : r.word_timings) {
    timings.push_back({t.token, t.t_start, t.t_end});
  }
  j["word_timings"] = std::move(timings);
  j["features_key"] = r.features_key;
  return j;
}

}  // namespace

std::vector<NarrativeRecord> parse_narratives(std::string_view text,
                                              std::vector<std::string>* warnings) {
  std::vector<NarrativeRecord> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) {
      end = text.size();
    }
    ++line_no;
    const std::string_view line = text.substr(start, end - start);
    start = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
      continue;
    }
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError("narratives line " + std::to_string(line_no) + ": malformed JSON (" +
                      e.what() + ")");
    }
    out.push_back(parse_record(j, line_no));
  }
  if (out.empty() && warnings != nullptr) {
    warnings->push_back("narratives: no records");
  }
  return out;
}

std::vector<NarrativeRecord> load_narratives(const std::string& path,
                                             std::vector<std::string>* warnings) {
  return parse_narratives(read_file(path), warnings);
}

std::string narratives_to_jsonl(std::span<const NarrativeRecord> records) {
  std::string out;
  for (const auto& r : records) {
    out += record_to_json(r).dump();
    out += '\n';
  }
  return out;
}

void write_narratives(const std::string& path, std::span<const NarrativeRecord> records) {
  write_file(path, narratives_to_jsonl(records));
}

// ---------------------------------------------------------------- features

FeatureFile parse_region_features(std::string_view bytes) {
  binary::Reader r(bytes, "feature file");
  if (r.get_bytes(sizeof(kFeatureMagic)) != std::string_view(kFeatureMagic, sizeof(kFeatureMagic))) {
    throw DataError("feature file: bad magic");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kFeatureVersion) {
    throw DataError("feature file: unsupported version " + std::to_string(version));
  }
  FeatureFile f;
  f.d_visual = r.get<std::uint32_t>();
  if (f.d_visual == 0) {
    throw DataError("feature file: d_visual is zero");
  }
  while (!r.at_end()) {
    std::string id = r.get_string();
    const auto regions = r.get<std::uint32_t>();
    if (regions == 0) {
      throw DataError("feature file: image '" + id + "' has no regions");
    }
    Tensor t(regions, f.d_visual);
    for (double& v : t.data) {
      v = static_cast<double>(r.get<float>());
    }
    if (!f.features.emplace(id, std::move(t)).second) {
      throw DataError("feature file: duplicate image id '" + id + "'");
    }
  }
  return f;
}

FeatureFile load_region_features(const std::string& path) {
  return parse_region_features(read_file(path));
}

std::string serialize_region_features(const FeatureFile& file) {
  binary::Writer w;
  w.put_bytes(std::string_view(kFeatureMagic, sizeof(kFeatureMagic)));
  w.put(kFeatureVersion);
  w.put(static_cast<std::uint32_t>(file.d_visual));
  for (const auto& [id, t] : file.features) {
    if (t.cols() != file.d_visual) {
      throw DataError("feature file: image '" + id + "' has width " + std::to_string(t.cols()));
    }
    w.put_string(id);
    w.put(static_cast<std::uint32_t>(t.rows()));
    for (double v : t.data) {
      w.put(static_cast<float>(v));
    }
  }
  return w.take();
}

void save_region_features(const std::string& path, const FeatureFile& file) {
  write_file(path, serialize_region_features(file));
}

// ---------------------------------------------------------------- synthetic data

SynthData synth_dataset(const SynthSpec& spec) {
  if (spec.num_types < 2) {
    throw UsageError("synth: need at least two object types");
  }
  if (spec.min_objects < 1 || spec.min_objects > spec.max_objects ||
      spec.max_objects > spec.num_types || spec.max_objects > 4) {
    throw UsageError("synth: need 1 <= min_objects <= max_objects <= min(num_types, 4)");
  }
  static const char* kNames[] = {"cat", "dog", "car", "tree", "ball", "cup", "bird", "lamp", "boat", "kite"};
  SynthData data;
  for (std::size_t k = 0; k < spec.num_types; ++k) {
    data.type_words.push_back(k < std::size(kNames) ? kNames[k] : "object" + std::to_string(k));
  }
  data.features.d_visual = spec.d_visual();

  Rng rng(spec.seed);
  constexpr double kWordSpan = 0.5;
  constexpr std::size_t kGrid = 2;
  for (std::size_t n = 0; n < spec.records; ++n) {
    NarrativeRecord rec;
    char id[32];
    std::snprintf(id, sizeof(id), "synth-%06zu", n);
    rec.image_id = id;
    rec.features_key = id;

    const std::size_t count = spec.min_objects + rng.index(spec.max_objects - spec.min_objects + 1);
    std::vector<std::size_t> types(spec.num_types);
    for (std::size_t k = 0; k < types.size(); ++k) {
      types[k] = k;
    }
    rng.shuffle(types);
    types.resize(count);

    // Objects sit in distinct cells of a 2x2 grid, so boxes never overlap.
    std::vector<std::size_t> cells(kGrid * kGrid);
    for (std::size_t c = 0; c < cells.size(); ++c) {
      cells[c] = c;
    }
    rng.shuffle(cells);

    std::vector<TraceBox> boxes;
    Tensor regions(count, spec.d_visual());
    for (std::size_t o = 0; o < count; ++o) {
      const double cell = 1.0 / static_cast<double>(kGrid);
      const double w = rng.uniform(0.2, 0.45);
      const double h = rng.uniform(0.2, 0.45);
      const double x1 = static_cast<double>(cells[o] % kGrid) * cell + rng.uniform(0.0, cell - w);
      const double y1 = static_cast<double>(cells[o] / kGrid) * cell + rng.uniform(0.0, cell - h);
      const TraceBox b{x1, y1, x1 + w, y1 + h, w * h};
      boxes.push_back(b);
      for (std::size_t k = 0; k < spec.num_types; ++k) {
        regions(o, k) = (k == types[o] ? 1.0 : 0.0) + spec.feature_noise * rng.normal();
      }
      const auto ch = b.channels();
      for (std::size_t c = 0; c < 5; ++c) {
        regions(o, spec.num_types + c) = ch[c];
      }
      for (std::size_t e = 0; e < spec.noise_dims; ++e) {
        regions(o, spec.num_types + 5 + e) = spec.feature_noise * rng.normal();
      }
    }
    data.features.features.emplace(rec.features_key, std::move(regions));

    std::vector<std::size_t> order(count);
    for (std::size_t o = 0; o < count; ++o) {
      order[o] = o;
    }
    rng.shuffle(order);

    double t = 0.0;
    for (std::string_view w : kSynthPrefix) {
      rec.caption.emplace_back(w);
      rec.word_timings.push_back({std::string(w), t, t + 0.8 * kWordSpan});
      t += kWordSpan;
    }
    for (std::size_t o : order) {
      const TraceBox& b = boxes[o];
      const std::string& word = data.type_words[types[o]];
      rec.caption.push_back(word);
      rec.word_timings.push_back({word, t, t + 0.8 * kWordSpan});
      rec.trace_points.push_back({b.x1, b.y1, t + 0.05});
      rec.trace_points.push_back({rng.uniform(b.x1, b.x2), rng.uniform(b.y1, b.y2), t + 0.15});
      rec.trace_points.push_back({rng.uniform(b.x1, b.x2), rng.uniform(b.y1, b.y2), t + 0.25});
      rec.trace_points.push_back({b.x2, b.y2, t + 0.35});
      t += kWordSpan;
    }
    data.records.push_back(std::move(rec));
  }
  return data;
}

// ---------------------------------------------------------------- examples

Vocabulary build_vocabulary(std::span<const NarrativeRecord> records) {
  std::set<std::string> words;
  for (const auto& r : records) {
    words.insert(r.caption.begin(), r.caption.end());
  }
  const std::vector<std::string> sorted(words.begin(), words.end());
  return Vocabulary(sorted);
}

std::vector<Example> make_examples(std::span<const NarrativeRecord> records,
                                   const FeatureFile& features, const Vocabulary& vocab) {
  std::vector<Example> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    auto it = features.features.find(r.features_key);
    if (it == features.features.end()) {
      throw DataError("record '" + r.image_id + "': no features for key '" + r.features_key + "'");
    }
    Example ex;
    ex.image_id = r.image_id;
    ex.regions = it->second;
    ex.caption = vocab.encode(r.caption);
    ex.caption.push_back(Vocabulary::kEnd);
    ex.trace = encode_trace(r.trace_points, r.word_timings);
    ex.trace.push_back(TraceBox::whole_image());
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace mitr
