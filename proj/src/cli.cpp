#include "mfdv/cli.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

#include "mfdv/errors.hpp"
#include "mfdv/inference.hpp"
#include "mfdv/optim.hpp"
#include "mfdv/report.hpp"

namespace mfdv::cli {
namespace {

namespace fs = std::filesystem;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const auto slash = text.find('/');
    const std::string head = text.substr(0, slash);
    double v = std::stod(head, &used);
    if (used != head.size()) throw std::invalid_argument(text);
    if (slash != std::string::npos) {
      const std::string tail = text.substr(slash + 1);
      const double den = std::stod(tail, &used);
      if (used != tail.size() || den == 0.0) throw std::invalid_argument(text);
      v /= den;
    }
    if (!std::isfinite(v)) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key, "expected a number, got '" + text + "'");
  }
}

std::uint64_t parse_uint(const std::string& key, const std::string& text) {
  if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError(key, "expected a non-negative integer, got '" + text + "'");
  }
  try {
    return std::stoull(text);
  } catch (const std::exception&) {
    throw ConfigError(key, "integer out of range: '" + text + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "1" || text == "true" || text == "on") return true;
  if (text == "0" || text == "false" || text == "off") return false;
  throw ConfigError(key, "expected a boolean, got '" + text + "'");
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string& key, const std::string&)> set;
};

template <class T>
Field size_field(T RunConfig::*member) {
  return {[member](const RunConfig& c) { return std::to_string(c.*member); },
          [member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = static_cast<T>(parse_uint(k, v)); }};
}

Field double_field(double RunConfig::*member) {
  return {[member](const RunConfig& c) { return fmt(c.*member); },
          [member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_double(k, v); }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"model.arch",
       {[](const RunConfig& c) { return c.arch; },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          if (v != "mini_cnn" && v != "mlp") throw ConfigError(k, "expected mini_cnn or mlp, got '" + v + "'");
          c.arch = v;
        }}},
      {"model.feature_dim", size_field(&RunConfig::feature_dim)},
      {"model.hidden", size_field(&RunConfig::hidden)},
      {"model.stochastic",
       {[](const RunConfig& c) { return std::string(c.stochastic ? "1" : "0"); },
        [](RunConfig& c, const std::string& k, const std::string& v) { c.stochastic = parse_bool(k, v); }}},
      {"mfdv.lambda1",
       {[](const RunConfig& c) { return fmt(c.loss.lambda1); },
        [](RunConfig& c, const std::string& k, const std::string& v) { c.loss.lambda1 = parse_double(k, v); }}},
      {"mfdv.lambda2",
       {[](const RunConfig& c) { return fmt(c.loss.lambda2); },
        [](RunConfig& c, const std::string& k, const std::string& v) { c.loss.lambda2 = parse_double(k, v); }}},
      {"mfdv.step_size", double_field(&RunConfig::step_size)},
      {"mfdv.tick",
       {[](const RunConfig& c) { return std::string(c.tick == nn::TickMode::PerEpoch ? "epoch" : "step"); },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "epoch") {
            c.tick = nn::TickMode::PerEpoch;
          } else if (v == "step") {
            c.tick = nn::TickMode::PerStep;
          } else {
            throw ConfigError(k, "expected epoch or step, got '" + v + "'");
          }
        }}},
      {"train.epochs", size_field(&RunConfig::epochs)},
      {"train.batch", size_field(&RunConfig::batch)},
      {"train.lr", double_field(&RunConfig::lr)},
      {"train.momentum", double_field(&RunConfig::momentum)},
      {"train.seed", size_field(&RunConfig::seed)},
      {"data.name",
       {[](const RunConfig& c) { return c.data; },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          if (v != "auto" && v != "cifar10" && v != "cifar100" && v != "synth") {
            throw ConfigError(k, "expected auto, cifar10, cifar100 or synth, got '" + v + "'");
          }
          c.data = v;
        }}},
      {"data.train_size", size_field(&RunConfig::train_size)},
      {"data.test_size", size_field(&RunConfig::test_size)},
      {"data.seed", size_field(&RunConfig::data_seed)},
      {"eval.mc_samples", size_field(&RunConfig::mc_samples)},
      {"eval.threads", size_field(&RunConfig::threads)},
      {"eval.attacks",
       {[](const RunConfig& c) {
          std::string out;
          for (const auto& a : c.attacks) out += (out.empty() ? "" : ";") + attacks::describe(a);
          return out;
        },
        [](RunConfig& c, const std::string&, const std::string& v) {
          c.attacks.clear();
          for (const auto& item : split(v, ';')) c.attacks.push_back(attacks::parse_attack(item));
        }}},
      {"checklist.budget",
       {[](const RunConfig& c) { return std::to_string(c.checklist.budget); },
        [](RunConfig& c, const std::string& k, const std::string& v) { c.checklist.budget = parse_uint(k, v); }}},
      {"checklist.eps",
       {[](const RunConfig& c) { return fmt(c.checklist.epsilon); },
        [](RunConfig& c, const std::string& k, const std::string& v) { c.checklist.epsilon = parse_double(k, v); }}},
      {"checklist.sweep",
       {[](const RunConfig& c) {
          std::string out;
          for (double e : c.checklist.sweep) out += (out.empty() ? "" : ";") + fmt(e);
          return out;
        },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.checklist.sweep.clear();
          for (const auto& item : split(v, ';')) c.checklist.sweep.push_back(parse_double(k, item));
        }}},
      {"checklist.pgd_steps",
       {[](const RunConfig& c) { return std::to_string(c.checklist.pgd_steps); },
        [](RunConfig& c, const std::string& k, const std::string& v) { c.checklist.pgd_steps = parse_uint(k, v); }}},
      {"checklist.square_budget",
       {[](const RunConfig& c) { return std::to_string(c.checklist.square_budget); },
        [](RunConfig& c, const std::string& k, const std::string& v) { c.checklist.square_budget = parse_uint(k, v); }}},
      {"checklist.noise_samples",
       {[](const RunConfig& c) { return std::to_string(c.checklist.noise_samples); },
        [](RunConfig& c, const std::string& k, const std::string& v) { c.checklist.noise_samples = parse_uint(k, v); }}},
      {"checklist.eot_samples",
       {[](const RunConfig& c) { return std::to_string(c.checklist.eot_samples); },
        [](RunConfig& c, const std::string& k, const std::string& v) { c.checklist.eot_samples = parse_uint(k, v); }}},
  };
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

nn::TrainConfig train_config(const RunConfig& c) {
  nn::TrainConfig t;
  t.epochs = c.epochs;
  t.batch_size = c.batch;
  t.lr = c.lr;
  t.momentum = c.momentum;
  t.seed = c.seed;
  t.loss = c.loss;
  t.tick = c.tick;
  t.mc_samples = c.mc_samples;
  t.threads = c.threads;
  return t;
}

eval::EvalOptions eval_options(const RunConfig& c) { return {c.mc_samples, c.seed, c.threads}; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out.flush()) throw std::runtime_error("write failed: " + path.string());
}

data::Dataset synth_split(const RunConfig& c, std::size_t n, data::Split split, std::uint64_t sample_seed) {
  data::SynthImageConfig sc;
  sc.n_per_class = (n + sc.classes - 1) / sc.classes;
  sc.template_seed = c.data_seed;
  sc.sample_seed = sample_seed;
  sc.split = split;
  return data::subset(data::synth_images(sc), n, c.data_seed);
}

eval::EvalReport base_report(const RunConfig& config, const nn::Model& model, const LoadedData& data) {
  eval::EvalReport report;
  report.model_id = model.digest();
  report.dataset_id = data.test.id();
  report.mc_samples = config.mc_samples;
  report.seed = config.seed;
  report.clean_accuracy = eval::clean_accuracy(model, data.test, eval_options(config));
  report.metadata["data_source"] = data.source;
  report.metadata["clean_misclassified"] = "counted as attack successes";
  report.metadata["mc_aggregation"] = "mean softmax";
  report.metadata["success_criterion"] = "MC-vote prediction wrong";
  return report;
}

// Fails before any work is done if either report file already exists.
fs::path report_path(const fs::path& run_dir, const std::optional<fs::path>& out, const char* name) {
  fs::path path = out ? *out : run_dir / "reports" / name;
  fs::path csv = path;
  csv.replace_extension(".csv");
  for (const auto& p : {path, csv}) {
    if (fs::exists(p)) throw std::runtime_error("refusing to overwrite existing " + p.string());
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  return path;
}

}  // namespace

void RunConfig::validate() const {
  if (feature_dim == 0) throw ConfigError("model.feature_dim", "must be >= 1");
  if (arch == "mlp" && hidden == 0) throw ConfigError("model.hidden", "must be >= 1");
  if (!(step_size >= 0.0)) throw ConfigError("mfdv.step_size", "must be >= 0");
  if (train_size == 0) throw ConfigError("data.train_size", "must be >= 1");
  if (test_size == 0) throw ConfigError("data.test_size", "must be >= 1");
  if (threads == 0) throw ConfigError("eval.threads", "must be >= 1");
  train_config(*this).validate();
  for (const auto& a : attacks) attacks::validate(a);
}

std::string to_text(const RunConfig& config) {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + "=" + field.get(config) + "\n";
  return out;
}

void set_value(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError(trim(assignment), "expected key=value");
  const std::string key = trim(assignment.substr(0, eq));
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError(key, "unknown config key");
  it->second.set(config, key, trim(assignment.substr(eq + 1)));
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    set_value(base, line);
  }
  base.validate();
  return base;
}

RunConfig load_config(const fs::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

LoadedData load_data(const RunConfig& config) {
  const char* env = std::getenv("MFDV_DATA_DIR");
  std::string name = config.data;
  if (name == "auto") name = env && *env ? "cifar10" : "synth";
  if (name == "cifar10" || name == "cifar100") {
    if (!env || !*env) throw std::runtime_error("data.name=" + name + " needs MFDV_DATA_DIR");
    const fs::path dir(env);
    auto [train, test] = name == "cifar10" ? data::load_cifar10(dir) : data::load_cifar100(dir);
    return {data::subset(train, config.train_size, config.data_seed),
            data::subset(test, config.test_size, config.data_seed + 1), name + ":" + dir.string()};
  }
  return {synth_split(config, config.train_size, data::Split::Train, derive_seed(config.data_seed, 0, 1)),
          synth_split(config, config.test_size, data::Split::Test, derive_seed(config.data_seed, 0, 2)),
          "surrogate:synth_images (CIFAR-shaped synthetic data, not CIFAR-10)"};
}

nn::Architecture architecture(const RunConfig& config, const Shape& example_shape, std::size_t classes) {
  if (config.arch == "mini_cnn") {
    if (example_shape.size() != 3) throw ShapeError("mini_cnn needs [C,H,W] examples, got " + to_string(example_shape));
    return nn::mini_cnn(example_shape[0], example_shape[1], example_shape[2], config.feature_dim, classes,
                        config.stochastic);
  }
  nn::Architecture a = nn::mlp(numel(example_shape), config.hidden, config.feature_dim, classes, config.stochastic);
  if (example_shape.size() > 1) {
    a.input_shape = example_shape;
    a.layers.insert(a.layers.begin(), nn::Flatten{});
  }
  return a;
}

void cmd_train(const RunConfig& config, const fs::path& run_dir, std::ostream& log) {
  config.validate();
  const Paths paths{run_dir};
  if (fs::exists(run_dir) && !fs::is_empty(run_dir)) {
    throw std::runtime_error("run directory " + run_dir.string() + " is not empty");
  }
  fs::create_directories(run_dir);
  write_text(paths.config(), to_text(config));

  const LoadedData data = load_data(config);
  log << "data: " << data.source << " (train " << data.train.size() << ", test " << data.test.size() << ")\n";
  Rng init(derive_seed(config.seed, 0, 0x10));
  nn::Model model(architecture(config, data.train.example_shape(), data.train.class_count()), init, config.step_size);

  std::string epochs = "epoch,lr,loss,cross_entropy,log_sigma,mean_sigma,test_accuracy\n";
  const nn::TrainLog tl = nn::train(model, data.train, &data.test, train_config(config), [&](const nn::EpochLog& e) {
    epochs += std::to_string(e.epoch) + "," + fmt(e.lr) + "," + fmt(e.loss) + "," + fmt(e.cross_entropy) + "," +
              fmt(e.log_sigma) + "," + fmt(e.mean_sigma) + "," + fmt(e.test_accuracy) + "\n";
    char line[160];
    std::snprintf(line, sizeof line, "epoch %3zu  loss %.4f  ce %.4f  mean_sigma %.4f  test_acc %.4f\n", e.epoch, e.loss,
                  e.cross_entropy, e.mean_sigma, e.test_accuracy);
    log << line << std::flush;
  });
  std::string steps = "step,loss,mean_sigma\n";
  for (const auto& s : tl.steps) steps += std::to_string(s.step) + "," + fmt(s.loss) + "," + fmt(s.mean_sigma) + "\n";

  write_text(paths.train_log(), epochs);
  write_text(paths.steps_log(), steps);
  nn::save_weights(model, paths.weights());
  log << "weights: " << paths.weights().string() << " (" << model.digest() << ")\n";
}

RunConfig run_config(const fs::path& run_dir, const std::vector<std::string>& overrides) {
  const Paths paths{run_dir};
  if (!fs::exists(paths.config())) throw std::runtime_error("no config.txt in " + run_dir.string());
  RunConfig c = load_config(paths.config());
  for (const auto& o : overrides) set_value(c, o);
  c.validate();
  return c;
}

nn::Model load_model(const RunConfig& config, const fs::path& run_dir, const LoadedData& data) {
  const Paths paths{run_dir};
  if (!fs::exists(paths.weights())) throw std::runtime_error("missing weights: " + paths.weights().string());
  Rng init(derive_seed(config.seed, 0, 0x10));
  nn::Model model(architecture(config, data.test.example_shape(), data.test.class_count()), init, config.step_size);
  nn::load_weights(model, paths.weights());
  return model;
}

eval::EvalReport cmd_attack(const RunConfig& config, const fs::path& run_dir, const std::optional<fs::path>& out,
                            std::ostream& log) {
  config.validate();
  if (config.attacks.empty()) throw ConfigError("eval.attacks", "no attacks configured");
  const fs::path path = report_path(run_dir, out, "attack.json");
  const LoadedData data = load_data(config);
  const nn::Model model = load_model(config, run_dir, data);
  eval::EvalReport report = base_report(config, model, data);
  log << "clean accuracy " << report.clean_accuracy << "\n";

  std::string failure;
  for (const auto& a : config.attacks) {
    const eval::RobustResult r = eval::robust_accuracy(model, data.test, a, eval_options(config));
    report.rows.push_back(eval::summarize(a, r));
    log << attacks::describe(a) << "  accuracy " << r.accuracy << (r.partial ? "  (partial)" : "") << "\n" << std::flush;
    if (r.partial) {
      failure = attacks::describe(a) + ": " + r.error;
      break;
    }
  }
  eval::write_report(report, path);
  log << "report: " << path.string() << "\n";
  if (!failure.empty()) throw std::runtime_error("attack aborted, partial report written: " + failure);
  return report;
}

eval::EvalReport cmd_checklist(const RunConfig& config, const fs::path& run_dir, const std::optional<fs::path>& out,
                               std::ostream& log) {
  config.validate();
  if (config.checklist.budget == 0) throw std::invalid_argument("empty evaluation budget");
  const fs::path path = report_path(run_dir, out, "checklist.json");
  const LoadedData data = load_data(config);
  const nn::Model model = load_model(config, run_dir, data);
  eval::EvalReport report = base_report(config, model, data);
  const eval::ChecklistResult c = eval::obfuscation_checklist(model, data.test, config.checklist, eval_options(config));
  report.rows = c.rows;
  report.checklist = c.verdicts;
  report.metadata["checklist_examples"] = std::to_string(std::min(config.checklist.budget, data.test.size()));
  eval::write_report(report, path);
  log << eval::format_checklist(report.checklist) << "report: " << path.string() << "\n";
  return report;
}

std::string cmd_diff(const fs::path& a, const fs::path& b) { return eval::diff(eval::read_report(a), eval::read_report(b)); }

void cmd_predict(const RunConfig& config, const fs::path& run_dir, std::size_t first, std::size_t count,
                 std::ostream& out) {
  const LoadedData data = load_data(config);
  if (first >= data.test.size()) throw std::invalid_argument("predict: index out of range");
  const nn::Model model = load_model(config, run_dir, data);
  const eval::EvalOptions options = eval_options(config);
  const std::size_t end = std::min(data.test.size(), first + count);
  for (std::size_t i = first; i < end; ++i) {
    Rng rng = eval::mc_rng(options, i);
    const Tensor p = eval::mc_predict(model, data.test.example(i), config.mc_samples, rng);
    out << i << " label=" << data.test.label(i) << " pred=" << eval::argmax(p) << " p=";
    for (std::size_t k = 0; k < p.size(); ++k) out << (k ? "," : "") << fmt(p[k]);
    out << "\n";
  }
}

}  // namespace mfdv::cli
