#include "mitr/cli.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "mitr/checkpoint.hpp"
#include "mitr/config.hpp"
#include "mitr/data.hpp"
#include "mitr/decode.hpp"
#include "mitr/error.hpp"
#include "mitr/lbm.hpp"
#include "mitr/metrics.hpp"
#include "mitr/selftest.hpp"

namespace mitr {

namespace {

using json = nlohmann::ordered_json;

std::string fixed4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------- trace JSONL

struct TraceRecord {
  std::string image_id;
  std::vector<std::string> tokens;
  AlignedTrace boxes;
};

json trace_record_json(const TraceRecord& r) {
  json j;
  j["image_id"] = r.image_id;
  j["tokens"] = r.tokens;
  json boxes = json::array();
  for (const TraceBox& b : r.boxes) {
    boxes.push_back({b.x1, b.y1, b.x2, b.y2, b.area});
  }
  j["boxes"] = std::move(boxes);
  return j;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") != std::string::npos) {
      lines.push_back(line);
    }
  }
  return lines;
}

json parse_line(const std::string& path, std::size_t line_no, const std::string& line) {
  try {
    json j = json::parse(line);
    if (!j.is_object()) {
      throw DataError(path + ":" + std::to_string(line_no) + ": expected a JSON object");
    }
    return j;
  } catch (const json::parse_error& e) {
    throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
  }
}

std::vector<TraceRecord> load_traces(const std::string& path) {
  std::vector<TraceRecord> out;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const json j = parse_line(path, i + 1, lines[i]);
    const std::string where = path + ":" + std::to_string(i + 1);
    TraceRecord r;
    try {
      r.image_id = j.value("image_id", "");
      const auto& boxes = j.at("boxes");
      for (const auto& b : boxes) {
        if (!b.is_array() || b.size() != 5) {
          throw DataError(where + ": each box needs 5 channels");
        }
        r.boxes.push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                           b[3].get<double>(), b[4].get<double>()});
      }
      if (j.contains("tokens")) {
        r.tokens = j.at("tokens").get<std::vector<std::string>>();
      }
    } catch (const json::exception& e) {
      throw DataError(where + ": field 'boxes' must be a list of [x1, y1, x2, y2, area] (" +
                      std::string(e.what()) + ")");
    }
    if (r.boxes.empty()) {
      throw DataError(where + ": empty trace");
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------- caption JSONL

std::vector<std::string> caption_field(const json& v, const std::string& where) {
  if (v.is_string()) {
    return tokenize(v.get<std::string>());
  }
  if (v.is_array()) {
    std::string joined;
    for (const auto& t : v) {
      if (!t.is_string()) {
        throw DataError(where + ": caption tokens must be strings");
      }
      joined += t.get<std::string>() + " ";
    }
    return tokenize(joined);
  }
  throw DataError(where + ": caption must be a string or a list of tokens");
}

// image_id -> captions, in first-appearance order of ids.
struct CaptionSet {
  std::vector<std::string> ids;
  std::map<std::string, std::vector<Tokens>> captions;
};

CaptionSet load_captions(const std::string& path) {
  CaptionSet set;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const json j = parse_line(path, i + 1, lines[i]);
    const std::string where = path + ":" + std::to_string(i + 1);
    if (!j.contains("image_id") || !j["image_id"].is_string()) {
      throw DataError(where + ": missing field 'image_id'");
    }
    const std::string id = j["image_id"].get<std::string>();
    std::vector<Tokens> caps;
    if (j.contains("captions")) {
      if (!j["captions"].is_array()) {
        throw DataError(where + ": 'captions' must be a list");
      }
      for (const auto& c : j["captions"]) {
        caps.push_back(caption_field(c, where));
      }
    } else if (j.contains("caption")) {
      caps.push_back(caption_field(j["caption"], where));
    } else {
      throw DataError(where + ": missing field 'caption'");
    }
    if (!set.captions.contains(id)) {
      set.ids.push_back(id);
    }
    auto& slot = set.captions[id];
    slot.insert(slot.end(), caps.begin(), caps.end());
  }
  return set;
}

// ---------------------------------------------------------------- commands

int cmd_encode_trace(const std::string& in, const std::string& out_path, std::ostream& err) {
  std::vector<std::string> warnings;
  const auto records = load_narratives(in, &warnings);
  for (const auto& w : warnings) {
    err << "warning: " << w << '\n';
  }
  std::string text;
  for (const auto& r : records) {
    TraceRecord t{r.image_id, r.caption, encode_trace(r.trace_points, r.word_timings)};
    text += trace_record_json(t).dump() + '\n';
  }
  write_file(out_path, text);
  return kExitOk;
}

int cmd_lbm(const std::string& gt_path, const std::string& pred_path, std::vector<std::size_t> ks,
            bool as_json, std::ostream& out) {
  if (ks.empty()) {
    ks.push_back(0);
  }
  const auto gt = load_traces(gt_path);
  const auto pred = load_traces(pred_path);
  if (gt.size() != pred.size()) {
    throw DataError("lbm: " + std::to_string(gt.size()) + " reference traces but " +
                    std::to_string(pred.size()) + " predictions");
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!gt[i].image_id.empty() && !pred[i].image_id.empty() && gt[i].image_id != pred[i].image_id) {
      throw DataError("lbm: line " + std::to_string(i + 1) + " pairs '" + gt[i].image_id +
                      "' with '" + pred[i].image_id + "'");
    }
  }

  // scores[i * ks.size() + c]; each worker owns a strided subset of pairs.
  std::vector<double> scores(gt.size() * ks.size(), 0.0);
  const std::size_t workers =
      std::max<std::size_t>(1, std::min<std::size_t>(std::thread::hardware_concurrency(), gt.size()));
  std::vector<std::exception_ptr> failures(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < gt.size(); i += workers) {
          for (std::size_t c = 0; c < ks.size(); ++c) {
            scores[i * ks.size() + c] = lbm_score(gt[i].boxes, pred[i].boxes, ks[c]);
          }
        }
      } catch (...) {
        failures[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) {
    t.join();
  }
  for (const auto& f : failures) {
    if (f) {
      std::rethrow_exception(f);
    }
  }

  std::vector<double> mean(ks.size(), 0.0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    for (std::size_t c = 0; c < ks.size(); ++c) {
      mean[c] += scores[i * ks.size() + c];
    }
  }
  for (double& m : mean) {
    m = gt.empty() ? 0.0 : m / static_cast<double>(gt.size());
  }

  if (as_json) {
    json j;
    json pairs = json::array();
    for (std::size_t i = 0; i < gt.size(); ++i) {
      json p;
      p["image_id"] = gt[i].image_id;
      for (std::size_t c = 0; c < ks.size(); ++c) {
        p["k" + std::to_string(ks[c])] = scores[i * ks.size() + c];
      }
      pairs.push_back(std::move(p));
    }
    j["pairs"] = std::move(pairs);
    json m;
    for (std::size_t c = 0; c < ks.size(); ++c) {
      m["k" + std::to_string(ks[c])] = mean[c];
    }
    j["mean"] = std::move(m);
    out << j.dump() << '\n';
    return kExitOk;
  }
  out << "image_id";
  for (std::size_t k : ks) {
    out << "\tk=" << k;
  }
  out << '\n';
  for (std::size_t i = 0; i < gt.size(); ++i) {
    out << (gt[i].image_id.empty() ? "#" + std::to_string(i + 1) : gt[i].image_id);
    for (std::size_t c = 0; c < ks.size(); ++c) {
      out << '\t' << fixed4(scores[i * ks.size() + c]);
    }
    out << '\n';
  }
  out << "mean";
  for (double m : mean) {
    out << '\t' << fixed4(m);
  }
  out << '\n';
  return kExitOk;
}

struct TrainArgs {
  std::string data, features, config, tasks, out, log;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_steps, epochs, val_records;
  bool as_json = false;
};

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("MITR_SEED");
  if (v == nullptr || *v == '\0') {
    return std::nullopt;
  }
  char* end = nullptr;
  errno = 0;
  const unsigned long long s = std::strtoull(v, &end, 10);
  if (errno != 0 || *end != '\0' || v[0] == '-') {
    throw UsageError("MITR_SEED must be a non-negative integer, got '" + std::string(v) + "'");
  }
  return s;
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  if (!a.config.empty()) {
    cfg = load_run_config(a.config);
  }
  if (const auto s = env_seed()) {
    cfg.train.seed = *s;
  }
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.max_steps) cfg.train.max_steps = *a.max_steps;
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.val_records) cfg.val_records = *a.val_records;
  if (!a.tasks.empty()) {
    apply_tasks(cfg, a.tasks);
  }
  cfg.train.validate();
  const LossWeights weights = effective_weights(cfg);
  weights.validate();

  std::vector<std::string> warnings;
  const auto records = load_narratives(a.data, &warnings);
  const FeatureFile features = load_region_features(a.features);
  for (const auto& w : warnings) {
    err << "warning: " << w << '\n';
  }
  if (records.empty()) {
    throw DataError("train: no records in '" + a.data + "'");
  }
  if (cfg.val_records >= records.size()) {
    throw UsageError("train: val_records must leave at least one training record");
  }
  const Vocabulary vocab = build_vocabulary(records);
  const auto examples = make_examples(records, features, vocab);
  const std::size_t n_train = examples.size() - cfg.val_records;
  const std::span<const Example> train_set(examples.data(), n_train);
  const std::span<const Example> val_set(examples.data() + n_train, cfg.val_records);

  ModelConfig mc = cfg.model;
  mc.vocab_size = vocab.size();
  mc.d_visual = features.d_visual;
  mc.validate();
  Mitr model(mc, vocab, cfg.train.seed);

  const std::string log_path = a.log.empty() ? a.out + ".metrics.jsonl" : a.log;
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) {
    throw DataError("cannot write '" + log_path + "'");
  }
  const TrainResult result = train(model, train_set, val_set, cfg.train, weights, &log);
  for (const auto& w : result.warnings) {
    err << "warning: " << w << '\n';
  }
  const std::string bytes = serialize_checkpoint(model);
  write_file(a.out, bytes);
  const std::string checksum = hex64(fnv1a64(bytes));

  if (a.as_json) {
    json j;
    j["checkpoint"] = a.out;
    j["checksum"] = checksum;
    j["steps"] = result.steps.size();
    j["final"] = json::parse(result.steps.empty() ? "{}" : metric_json(result.steps.back()));
    if (!result.validation.empty()) {
      j["validation"] = json::parse(validation_json(result.validation.back()));
    }
    out << j.dump() << '\n';
  } else {
    out << "steps " << result.steps.size() << '\n';
    if (!result.steps.empty()) {
      const auto& l = result.steps.back().loss;
      out << "final loss " << fixed4(l.total) << " (trace " << fixed4(l.trace) << ", caption "
          << fixed4(l.caption) << ", cycle " << fixed4(l.cycle) << ", joint " << fixed4(l.joint)
          << ")\n";
    }
    if (!result.validation.empty()) {
      const auto& v = result.validation.back();
      out << "val caption accuracy " << fixed4(v.caption_accuracy) << ", trace LBM(k=0) "
          << fixed4(v.trace_lbm_k0) << ", BLEU-4 " << fixed4(v.caption_bleu4) << '\n';
    }
    out << "checkpoint " << a.out << " checksum " << checksum << '\n';
  }
  return kExitOk;
}

struct GenerateArgs {
  std::string task, ckpt, data, features, out;
  std::size_t beam = 5;
};

int cmd_generate(const GenerateArgs& a, std::ostream& out, std::ostream& err) {
  const TaskMode task = parse_task(a.task);
  if (a.beam < 1) {
    throw UsageError("generate: beam width must be at least 1");
  }
  const Mitr model = load_checkpoint(a.ckpt);
  std::vector<std::string> warnings;
  const auto records = load_narratives(a.data, &warnings);
  for (const auto& w : warnings) {
    err << "warning: " << w << '\n';
  }
  const FeatureFile features = load_region_features(a.features);
  if (features.d_visual != model.config().d_visual) {
    throw DataError("generate: features have width " + std::to_string(features.d_visual) +
                    ", checkpoint expects " + std::to_string(model.config().d_visual));
  }
  std::string text;
  for (const auto& r : records) {
    const auto it = features.features.find(r.features_key);
    if (it == features.features.end()) {
      throw DataError("record '" + r.image_id + "': no features for key '" + r.features_key + "'");
    }
    const Tensor& regions = it->second;
    TraceRecord t;
    t.image_id = r.image_id;
    switch (task) {
      case TaskMode::ControlledCaption: {
        const auto ids = generate_caption(model, regions, encode_trace(r.trace_points, r.word_timings), a.beam);
        t.tokens = model.vocab().decode(ids);
        break;
      }
      case TaskMode::ControlledTrace: {
        t.tokens = r.caption;
        t.boxes = generate_trace(model, regions, model.vocab().encode(r.caption));
        break;
      }
      case TaskMode::Joint: {
        const auto j = generate_joint(model, regions);
        t.tokens = model.vocab().decode(j.caption);
        t.boxes = j.trace;
        break;
      }
    }
    json j;
    j["image_id"] = t.image_id;
    std::string caption;
    for (const auto& w : t.tokens) {
      caption += (caption.empty() ? "" : " ") + w;
    }
    j["caption"] = caption;
    if (task != TaskMode::ControlledCaption) {
      const json tj = trace_record_json(t);
      j["tokens"] = tj["tokens"];
      j["boxes"] = tj["boxes"];
    }
    text += j.dump() + '\n';
  }
  if (a.out.empty()) {
    out << text;
  } else {
    write_file(a.out, text);
  }
  return kExitOk;
}

int cmd_eval_captions(const std::string& cand_path, const std::string& ref_path, bool as_json,
                      std::ostream& out) {
  const CaptionSet cands = load_captions(cand_path);
  const CaptionSet refs = load_captions(ref_path);
  std::vector<Tokens> c;
  std::vector<std::vector<Tokens>> r;
  for (const auto& id : cands.ids) {
    const auto& list = cands.captions.at(id);
    if (list.size() != 1) {
      throw DataError("eval-captions: image '" + id + "' has " + std::to_string(list.size()) +
                      " candidate captions");
    }
    const auto it = refs.captions.find(id);
    if (it == refs.captions.end()) {
      throw DataError("eval-captions: no reference for image '" + id + "'");
    }
    c.push_back(list[0]);
    r.push_back(it->second);
  }
  if (c.empty()) {
    throw DataError("eval-captions: no candidates in '" + cand_path + "'");
  }
  double rouge = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    rouge += rouge_l(c[i], r[i]);
  }
  rouge /= static_cast<double>(c.size());
  const CiderResult cd = cider(c, r);
  const std::vector<std::pair<std::string, double>> rows{
      {"BLEU-1", corpus_bleu(c, r, 1)},
      {"BLEU-4", corpus_bleu(c, r, 4)},
      {"ROUGE-L", rouge},
      {"CIDEr", cd.mean},
  };
  if (as_json) {
    json j;
    for (const auto& [name, v] : rows) {
      j[name] = v;
    }
    j["images"] = c.size();
    out << j.dump() << '\n';
  } else {
    for (const auto& [name, v] : rows) {
      out << std::left << std::setw(8) << name << ' ' << fixed4(v) << '\n';
    }
  }
  return kExitOk;
}

int cmd_selftest(bool as_json, std::ostream& out) {
  const auto checks = run_selftest();
  std::size_t passed = 0;
  json list = json::array();
  for (const auto& c : checks) {
    passed += c.passed ? 1 : 0;
    if (as_json) {
      list.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
    } else {
      out << (c.passed ? "PASS " : "FAIL ") << c.name << (c.detail.empty() ? "" : " (" + c.detail + ")")
          << '\n';
    }
  }
  if (as_json) {
    json j;
    j["checks"] = std::move(list);
    j["passed"] = passed;
    j["total"] = checks.size();
    out << j.dump() << '\n';
  } else {
    out << passed << "/" << checks.size() << " checks passed\n";
  }
  return passed == checks.size() ? kExitOk : kExitNumerical;
}

struct SynthArgs {
  std::string data, features;
  SynthSpec spec;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  const SynthData d = synth_dataset(a.spec);
  write_narratives(a.data, d.records);
  save_region_features(a.features, d.features);
  out << d.records.size() << " records, d_visual " << d.features.d_visual << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mirrored transformer for captions and traces"};
  app.require_subcommand(1);
  bool as_json = false;

  std::string in_path, out_path;
  auto* encode = app.add_subcommand("encode-trace", "Turn narrative mouse traces into per-word boxes");
  encode->add_option("--in", in_path, "Narrative JSONL")->required();
  encode->add_option("--out", out_path, "Output trace JSONL")->required();

  std::string gt_path, pred_path;
  std::vector<std::size_t> ks;
  auto* lbm = app.add_subcommand("lbm", "Local bipartite matching distance between trace files");
  lbm->add_option("--gt", gt_path, "Reference trace JSONL")->required();
  lbm->add_option("--pred", pred_path, "Predicted trace JSONL (same order)")->required();
  lbm->add_option("--k", ks, "Window size; repeat for several (default 0)")->take_all();
  lbm->add_flag("--json", as_json, "Machine-readable output");

  TrainArgs ta;
  auto* trainc = app.add_subcommand("train", "Train a model and write a checkpoint");
  trainc->add_option("--data", ta.data, "Narrative JSONL")->required();
  trainc->add_option("--features", ta.features, "Region feature file")->required();
  trainc->add_option("--config", ta.config, "Flat key = value config file");
  trainc->add_option("--tasks", ta.tasks, "Comma list of trace, caption, joint, cycle_b, cycle_s");
  trainc->add_option("--out", ta.out, "Checkpoint path")->required();
  trainc->add_option("--log", ta.log, "Metrics JSONL path (default <out>.metrics.jsonl)");
  trainc->add_option("--seed", ta.seed, "Seed (overrides config and MITR_SEED)");
  trainc->add_option("--max-steps", ta.max_steps, "Stop after this many steps (0: no limit)");
  trainc->add_option("--epochs", ta.epochs, "Number of epochs");
  trainc->add_option("--val-records", ta.val_records, "Records held out from the end for validation");
  trainc->add_flag("--json", ta.as_json, "Machine-readable summary");

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Generate captions and/or traces from a checkpoint");
  gen->add_option("--task", ga.task, "joint | caption | trace")->required();
  gen->add_option("--ckpt", ga.ckpt, "Checkpoint")->required();
  gen->add_option("--data", ga.data, "Narrative JSONL (captions for trace, traces for caption)")
      ->required();
  gen->add_option("--features", ga.features, "Region feature file")->required();
  gen->add_option("--beam", ga.beam, "Beam width for caption generation")->capture_default_str();
  gen->add_option("--out", ga.out, "Output JSONL (default stdout)");

  std::string cand_path, ref_path;
  auto* evalc = app.add_subcommand("eval-captions", "BLEU-1/4, ROUGE-L and CIDEr of candidate captions");
  evalc->add_option("--cand", cand_path, "Candidate JSONL {image_id, caption}")->required();
  evalc->add_option("--ref", ref_path, "Reference JSONL {image_id, caption | captions}")->required();
  evalc->add_flag("--json", as_json, "Machine-readable output");

  auto* self = app.add_subcommand("selftest", "Run built-in oracle, gradient and mask checks");
  self->add_flag("--json", as_json, "Machine-readable output");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset");
  synth->add_option("--data", sa.data, "Output narrative JSONL")->required();
  synth->add_option("--features", sa.features, "Output feature file")->required();
  synth->add_option("--records", sa.spec.records, "Number of records")->capture_default_str();
  synth->add_option("--types", sa.spec.num_types, "Object types")->capture_default_str();
  synth->add_option("--min-objects", sa.spec.min_objects, "Fewest objects per image")->capture_default_str();
  synth->add_option("--max-objects", sa.spec.max_objects, "Most objects per image")->capture_default_str();
  synth->add_option("--seed", sa.spec.seed, "Seed")->capture_default_str();

  std::vector<const char*> argv;
  for (const auto& a : args) {
    argv.push_back(a.c_str());
  }
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (encode->parsed()) return cmd_encode_trace(in_path, out_path, err);
    if (lbm->parsed()) return cmd_lbm(gt_path, pred_path, ks, as_json, out);
    if (trainc->parsed()) return cmd_train(ta, out, err);
    if (gen->parsed()) return cmd_generate(ga, out, err);
    if (evalc->parsed()) return cmd_eval_captions(cand_path, ref_path, as_json, out);
    if (self->parsed()) return cmd_selftest(as_json, out);
    if (synth->parsed()) return cmd_synth(sa, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace mitr
