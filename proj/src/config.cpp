#include "mitr/config.hpp"

#include <charconv>
#include <functional>
#include <sstream>

#include "mitr/checkpoint.hpp"
#include "mitr/error.hpp"

namespace mitr {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) {
    return {};
  }
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw UsageError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) {
      return d;
    }
  } catch (const std::exception&) {
  }
  throw UsageError("config: '" + key + "' expects a number, got '" + v + "'");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto size_field = [&t](const char* key, auto member) {
      t[key] = [member](RunConfig& c, const std::string& k, const std::string& v) {
        member(c) = to_size(k, v);
      };
    };
    auto real_field = [&t](const char* key, auto member) {
      t[key] = [member](RunConfig& c, const std::string& k, const std::string& v) {
        member(c) = to_double(k, v);
      };
    };
    size_field("d_model", [](RunConfig& c) -> std::size_t& { return c.model.d_model; });
    size_field("n_heads", [](RunConfig& c) -> std::size_t& { return c.model.n_heads; });
    size_field("n_layers", [](RunConfig& c) -> std::size_t& { return c.model.n_layers; });
    size_field("d_ffn", [](RunConfig& c) -> std::size_t& { return c.model.d_ffn; });
    size_field("max_len", [](RunConfig& c) -> std::size_t& { return c.model.max_len; });
    real_field("lr", [](RunConfig& c) -> double& { return c.train.lr; });
    real_field("lr_decay", [](RunConfig& c) -> double& { return c.train.lr_decay; });
    size_field("lr_decay_every", [](RunConfig& c) -> std::size_t& { return c.train.lr_decay_every; });
    size_field("batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; });
    size_field("epochs", [](RunConfig& c) -> std::size_t& { return c.train.epochs; });
    size_field("max_steps", [](RunConfig& c) -> std::size_t& { return c.train.max_steps; });
    real_field("replace_prob", [](RunConfig& c) -> double& { return c.train.replace_prob; });
    real_field("gumbel_tau", [](RunConfig& c) -> double& { return c.train.gumbel_tau; });
    size_field("segments", [](RunConfig& c) -> std::size_t& { return c.train.segments; });
    size_field("eval_every", [](RunConfig& c) -> std::size_t& { return c.train.eval_every; });
    real_field("lambda_trace", [](RunConfig& c) -> double& { return c.weights.trace; });
    real_field("lambda_caption", [](RunConfig& c) -> double& { return c.weights.caption; });
    real_field("lambda_cycle", [](RunConfig& c) -> double& { return c.weights.cycle; });
    real_field("lambda_joint", [](RunConfig& c) -> double& { return c.weights.joint; });
    size_field("beam", [](RunConfig& c) -> std::size_t& { return c.beam; });
    size_field("val_records", [](RunConfig& c) -> std::size_t& { return c.val_records; });
    t["seed"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      std::uint64_t out = 0;
      const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
      if (ec != std::errc() || p != v.data() + v.size()) {
        throw UsageError("config: '" + k + "' expects a non-negative integer, got '" + v + "'");
      }
      c.train.seed = out;
    };
    t["tasks"] = [](RunConfig& c, const std::string&, const std::string& v) { apply_tasks(c, v); };
    return t;
  }();
  return table;
}

}  // namespace

std::map<std::string, std::string> parse_key_values(std::string_view text) {
  std::map<std::string, std::string> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string_view raw = text.substr(pos, nl == std::string_view::npos ? text.npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#') {
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw UsageError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key.empty() || value.empty()) {
      throw UsageError("config line " + std::to_string(line_no) + ": empty key or value");
    }
    if (!setters().contains(key)) {
      throw UsageError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    out[key] = value;
  }
  return out;
}

void apply_settings(RunConfig& config, const std::map<std::string, std::string>& settings) {
  for (const auto& [key, value] : settings) {
    const auto it = setters().find(key);
    if (it == setters().end()) {
      throw UsageError("config: unknown key '" + key + "'");
    }
    it->second(config, key, value);
  }
}

RunConfig load_run_config(const std::string& path) {
  RunConfig config;
  apply_settings(config, parse_key_values(read_file(path)));
  return config;
}

std::vector<std::string> split_list(std::string_view text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const auto item = trim(text.substr(pos, comma == std::string_view::npos ? text.npos : comma - pos));
    if (!item.empty()) {
      out.emplace_back(item);
    }
    if (comma == std::string_view::npos) {
      break;
    }
    pos = comma + 1;
  }
  return out;
}

void apply_tasks(RunConfig& config, std::string_view tasks) {
  const auto names = split_list(tasks);
  if (names.empty()) {
    throw UsageError("tasks: empty task list");
  }
  CycleMode cycle = CycleMode::None;
  for (const auto& n : names) {
    if (n == "trace" || n == "caption" || n == "joint") {
      continue;
    }
    if (n == "cycle_b" || n == "cycle_s") {
      const CycleMode m = n == "cycle_b" ? CycleMode::Batch : CycleMode::Segment;
      if (cycle != CycleMode::None && cycle != m) {
        throw UsageError("tasks: cycle_b and cycle_s are mutually exclusive");
      }
      cycle = m;
    } else {
      throw UsageError("tasks: unknown task '" + n + "' (expected trace, caption, joint, cycle_b, cycle_s)");
    }
  }
  config.train.cycle = cycle;
  config.tasks = names;
}

LossWeights effective_weights(const RunConfig& config) {
  auto listed = [&](std::initializer_list<const char*> any) {
    for (const auto& t : config.tasks) {
      for (const char* a : any) {
        if (t == a) {
          return true;
        }
      }
    }
    return false;
  };
  LossWeights w = config.weights;
  if (!listed({"trace"})) w.trace = 0.0;
  if (!listed({"caption"})) w.caption = 0.0;
  if (!listed({"joint"})) w.joint = 0.0;
  if (!listed({"cycle_b", "cycle_s"})) w.cycle = 0.0;
  return w;
}

std::string render_config(const RunConfig& c) {
  std::ostringstream o;
  o.precision(17);
  o << "d_model = " << c.model.d_model << '\n'
    << "n_heads = " << c.model.n_heads << '\n'
    << "n_layers = " << c.model.n_layers << '\n'
    << "d_ffn = " << c.model.d_ffn << '\n'
    << "max_len = " << c.model.max_len << '\n'
    << "lr = " << c.train.lr << '\n'
    << "lr_decay = " << c.train.lr_decay << '\n'
    << "lr_decay_every = " << c.train.lr_decay_every << '\n'
    << "batch_size = " << c.train.batch_size << '\n'
    << "epochs = " << c.train.epochs << '\n'
    << "max_steps = " << c.train.max_steps << '\n'
    << "replace_prob = " << c.train.replace_prob << '\n'
    << "gumbel_tau = " << c.train.gumbel_tau << '\n'
    << "segments = " << c.train.segments << '\n'
    << "eval_every = " << c.train.eval_every << '\n'
    << "seed = " << c.train.seed << '\n'
    << "lambda_trace = " << c.weights.trace << '\n'
    << "lambda_caption = " << c.weights.caption << '\n'
    << "lambda_cycle = " << c.weights.cycle << '\n'
    << "lambda_joint = " << c.weights.joint << '\n'
    << "beam = " << c.beam << '\n'
    << "val_records = " << c.val_records << '\n';
  std::string tasks;
  for (const auto& t : c.tasks) {
    tasks += (tasks.empty() ? "" : ",") + t;
  }
  o << "tasks = " << tasks << '\n';
  return o.str();
}

}  // namespace mitr
