// cli.hpp - command-line front end
//
// Subcommands: features, tracklets, train, eval, grid, track, score.
// Parameters come from flat-sectioned key=value config files (--config /
// --cfg) with command-line flags taking precedence. Every run that writes an
// output leaves a .manifest sidecar naming the inputs, outputs, seed and tool
// version. Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "msdoas/classifier_eval.hpp"
#include "msdoas/common.hpp"
#include "msdoas/embedding.hpp"
#include "msdoas/model.hpp"
#include "msdoas/mot_metrics.hpp"
#include "msdoas/tracker.hpp"
#include "msdoas/tracklet.hpp"

namespace msdoas {

constexpr const char* kToolVersion = "1.0.0";

struct RunConfig {
  std::string subcommand;
  std::string positional;  // `features synth` mode selector
  bool help = false;
  // canonical "section.key" -> values; repeatable keys hold several entries
  std::map<std::string, std::vector<std::string>> values;

  bool has(const std::string& key) const { return values.count(key) > 0; }

  std::string get_str(const std::string& key, const char* flag) const {
    const auto it = values.find(key);
    if (it == values.end() || it->second.empty())
      throw UsageError(std::string("missing required --") + flag);
    return it->second.back();
  }
  std::string get_str_or(const std::string& key, const std::string& dflt) const {
    const auto it = values.find(key);
    return it == values.end() || it->second.empty() ? dflt : it->second.back();
  }
  std::vector<std::string> get_list(const std::string& key) const {
    const auto it = values.find(key);
    return it == values.end() ? std::vector<std::string>{} : it->second;
  }
  std::int64_t get_int_or(const std::string& key, std::int64_t dflt,
                          std::int64_t min, const char* constraint) const {
    const auto it = values.find(key);
    std::int64_t v = dflt;
    if (it != values.end() && !it->second.empty()) {
      try {
        v = parse_int(it->second.back(), key);
      } catch (const DataError& e) {
        throw UsageError(e.what());
      }
    }
    if (v < min) throw UsageError(std::string(constraint));
    return v;
  }
  double get_real_or(const std::string& key, double dflt, double min,
                     const char* constraint) const {
    const auto it = values.find(key);
    double v = dflt;
    if (it != values.end() && !it->second.empty()) {
      try {
        v = parse_real(it->second.back(), key);
      } catch (const DataError& e) {
        throw UsageError(e.what());
      }
    }
    if (v < min) throw UsageError(std::string(constraint));
    return v;
  }
  std::uint64_t get_seed(const std::string& key) const {
    const auto it = values.find(key);
    if (it == values.end() || it->second.empty()) return 0;
    try {
      return static_cast<std::uint64_t>(parse_int(it->second.back(), key));
    } catch (const DataError& e) {
      throw UsageError(e.what());
    }
  }
};

// ---------------------------------------------------------------------------
// Argument and config-file parsing
// ---------------------------------------------------------------------------

namespace detail {

struct FlagSpec {
  const char* flag;
  const char* key;        // canonical section.key
  bool repeatable = false;
};

inline const std::map<std::string, std::vector<FlagSpec>>& flag_tables() {
  static const std::map<std::string, std::vector<FlagSpec>> tables = {
      {"features",
       {{"out", "paths.out"},
        {"identities", "synthetic.identities"},
        {"frames", "synthetic.frames"},
        {"separation", "synthetic.separation"},
        {"noise", "synthetic.noise"},
        {"drift", "synthetic.drift"},
        {"n", "synthetic.n"},
        {"seed", "synthetic.seed"},
        {"sequence", "synthetic.sequence"},
        {"id-offset", "synthetic.id_offset"}}},
      {"tracklets",
       {{"kind", "factory.kind"},
        {"M", "factory.M"},
        {"T", "factory.T"},
        {"F", "factory.F"},
        {"S", "factory.S"},
        {"N", "factory.N"},
        {"seed", "factory.seed"},
        {"pool", "paths.pool", true},
        {"out", "paths.out"}}},
      {"train",
       {{"tracklets", "paths.tracklets"},
        {"B", "train.B"},
        {"IT", "train.IT"},
        {"lr", "train.lr"},
        {"eps", "train.eps"},
        {"init-scale", "train.init_scale"},
        {"seed", "train.seed"},
        {"H", "model.H"},
        {"out", "paths.out"},
        {"trace", "paths.trace"}}},
      {"eval",
       {{"model", "paths.model"},
        {"test", "paths.test"},
        {"out", "paths.out"},
        {"svg", "paths.svg"}}},
      {"grid",
       {{"pool", "paths.pool", true},
        {"out", "paths.out"},
        {"M", "factory.M"},
        {"test-M", "factory.test_M"},
        {"T", "factory.T"},
        {"F", "factory.F"},
        {"S", "factory.S"},
        {"N", "factory.N"},
        {"B", "train.B"},
        {"IT", "train.IT"},
        {"lr", "train.lr"},
        {"H", "model.H"},
        {"seed", "grid.seed"}}},
      {"track",
       {{"det", "paths.det"},
        {"features", "paths.features"},
        {"model", "paths.model"},
        {"out", "paths.out"},
        {"lambda", "tracker.lambda"},
        {"th-assoc", "tracker.th_assoc"},
        {"iou-gate", "tracker.iou_gate"},
        {"max-age", "tracker.max_age"},
        {"confirm-hits", "tracker.confirm_hits"},
        {"conf-floor", "tracker.conf_floor"},
        // synthetic-world parameters for --features synthetic:gt
        {"identities", "synthetic.identities"},
        {"separation", "synthetic.separation"},
        {"noise", "synthetic.noise"},
        {"drift", "synthetic.drift"},
        {"seed", "synthetic.seed"},
        {"id-offset", "synthetic.id_offset"}}},
      {"score",
       {{"gt", "paths.gt", true},
        {"hyp", "paths.hyp", true},
        {"out", "paths.out"},
        {"iou", "metrics.iou"},
        {"model", "paths.model"},
        {"detection", "paths.detection"},
        {"history", "paths.history"}}},
  };
  return tables;
}

inline const FlagSpec* find_flag(const std::string& subcommand,
                                 const std::string& flag) {
  const auto& tables = flag_tables();
  const auto it = tables.find(subcommand);
  if (it == tables.end()) return nullptr;
  for (const FlagSpec& spec : it->second)
    if (flag == spec.flag) return &spec;
  return nullptr;
}

// flat-sectioned key=value text; '#' starts a comment
inline std::map<std::string, std::vector<std::string>> load_config_file(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file: " + path);
  std::map<std::string, std::vector<std::string>> values;
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view sv = trim(line);
    if (sv.empty() || sv.front() == '#') continue;
    if (sv.front() == '[') {
      if (sv.back() != ']')
        throw DataError(path + ":" + std::to_string(line_no) +
                        ": malformed section header");
      section = std::string(trim(sv.substr(1, sv.size() - 2)));
      continue;
    }
    const auto eq = sv.find('=');
    if (eq == std::string_view::npos)
      throw DataError(path + ":" + std::to_string(line_no) +
                      ": expected key=value");
    const std::string key = std::string(trim(sv.substr(0, eq)));
    const std::string value = std::string(trim(sv.substr(eq + 1)));
    if (key.empty())
      throw DataError(path + ":" + std::to_string(line_no) + ": empty key");
    values[section.empty() ? key : section + "." + key].push_back(value);
  }
  return values;
}

}  // namespace detail

inline RunConfig parse_args(const std::vector<std::string>& args) {
  if (args.empty())
    throw UsageError(
        "usage: msdoas <features|tracklets|train|eval|grid|track|score> "
        "[--help] [flags]");
  RunConfig cfg;
  cfg.subcommand = args[0];
  if (cfg.subcommand == "--help" || cfg.subcommand == "help") {
    cfg.subcommand = "";
    cfg.help = true;
    return cfg;
  }
  if (!detail::flag_tables().count(cfg.subcommand))
    throw UsageError("unknown subcommand '" + cfg.subcommand + "'");

  std::vector<std::string> config_paths;
  std::map<std::string, std::vector<std::string>> flag_values;
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& token = args[i];
    if (token == "--help") {
      cfg.help = true;
      continue;
    }
    if (token.starts_with("--")) {
      const std::string flag = token.substr(2);
      if (i + 1 >= args.size())
        throw UsageError("flag --" + flag + " needs a value");
      const std::string& value = args[++i];
      if (flag == "config" || flag == "cfg") {
        config_paths.push_back(value);
        continue;
      }
      const detail::FlagSpec* spec = detail::find_flag(cfg.subcommand, flag);
      if (!spec)
        throw UsageError("unknown flag --" + flag + " for subcommand " +
                         cfg.subcommand);
      if (!spec->repeatable) flag_values[spec->key].clear();
      flag_values[spec->key].push_back(value);
      continue;
    }
    if (!cfg.positional.empty())
      throw UsageError("unexpected argument '" + token + "'");
    cfg.positional = token;
  }

  // config files first, then flags override
  for (const std::string& path : config_paths) {
    for (auto& [key, vals] : detail::load_config_file(path)) {
      auto& slot = cfg.values[key];
      for (auto& v : vals) slot.push_back(std::move(v));
    }
  }
  for (auto& [key, vals] : flag_values) cfg.values[key] = std::move(vals);
  return cfg;
}

// ---------------------------------------------------------------------------
// Manifest sidecar
// ---------------------------------------------------------------------------

namespace detail {

inline void write_manifest(const std::string& beside_output,
                           const std::string& subcommand,
                           const std::vector<std::string>& inputs,
                           const std::vector<std::string>& outputs,
                           const std::string& seed) {
  std::string out;
  out += "tool=msdoas " + std::string(kToolVersion) + "\n";
  out += "subcommand=" + subcommand + "\n";
  if (!seed.empty()) out += "seed=" + seed + "\n";
  for (const std::string& path : inputs) out += "input=" + path + "\n";
  for (const std::string& path : outputs) out += "output=" + path + "\n";
  const std::time_t now =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  out += std::string("created=") + stamp + "\n";
  std::ofstream f(beside_output + ".manifest", std::ios::trunc);
  if (f) f << out;  // manifest failure never fails the run
}

inline std::string usage_text(const std::string& subcommand) {
  if (subcommand == "features")
    return "msdoas features synth --out <file> [--identities N] [--frames N]\n"
           "  [--separation X] [--noise X] [--drift X] [--n N] [--seed N]\n"
           "  [--sequence NAME] [--id-offset N] [--config <file>]\n"
           "Generates a synthetic observation pool and writes a feature file.";
  if (subcommand == "tracklets")
    return "msdoas tracklets --kind {1..5} --M <count> [--T N] [--F N] [--S N]\n"
           "  [--N N] [--seed N] --pool <features>... --out <file>\n"
           "Builds a balanced tracklet set from pooled feature files.";
  if (subcommand == "train")
    return "msdoas train --tracklets <file> [--B N] [--IT N] [--lr X]\n"
           "  [--H N] [--eps X] [--init-scale X] [--seed N] --out <model>\n"
           "  [--trace <csv>]\n"
           "Trains the similarity scorer on a tracklet set.";
  if (subcommand == "eval")
    return "msdoas eval --model <file> --test <tracklets> --out <csv>\n"
           "  [--svg <file>]\n"
           "Threshold sweep of a trained model over a test set.";
  if (subcommand == "grid")
    return "msdoas grid --pool <features>... --out <dir> [--M N] [--test-M N]\n"
           "  [--T N] [--F N] [--S N] [--N N] [--B N] [--IT N] [--lr X]\n"
           "  [--H N] [--seed N]\n"
           "Trains 5 models (one per tracklet kind) and evaluates each on all\n"
           "5 test kinds; writes per-cell reports and summary tables.";
  if (subcommand == "track")
    return "msdoas track --det <file> --features <file|synthetic:gt>\n"
           "  --model <file> [--cfg <file>] --out <file>\n"
           "  [--lambda X] [--th-assoc X] [--iou-gate X] [--max-age N]\n"
           "  [--confirm-hits N] [--conf-floor X]\n"
           "Runs online tracking over a detection file.";
  if (subcommand == "score")
    return "msdoas score --gt <file> --hyp <file> [more --gt/--hyp pairs]\n"
           "  [--iou X] [--out <csv>]\n"
           "msdoas score --model <file> --detection <features>\n"
           "  --history <features>\n"
           "First form scores tracking output against ground truth; second\n"
           "form prints the similarity score for one detection/history pair.";
  return "usage: msdoas <features|tracklets|train|eval|grid|track|score> "
         "[--help]\n"
         "Run 'msdoas <subcommand> --help' for details.";
}

// ---------------------------------------------------------------------------
// Subcommand drivers
// ---------------------------------------------------------------------------

inline SyntheticWorldConfig synthetic_config(const RunConfig& cfg) {
  SyntheticWorldConfig world;
  world.identity_count = static_cast<int>(cfg.get_int_or(
      "synthetic.identities", 8, 1, "identities must be >= 1"));
  world.separation = cfg.get_real_or("synthetic.separation", 10.0, 0.0,
                                     "separation must be > 0");
  world.noise_scale =
      cfg.get_real_or("synthetic.noise", 1.0, 0.0, "noise must be > 0");
  world.drift_per_frame =
      cfg.get_real_or("synthetic.drift", 0.0, 0.0, "drift must be >= 0");
  world.feature_dim = static_cast<int>(
      cfg.get_int_or("synthetic.n", 1000, 1, "n must be >= 1"));
  world.identity_offset = static_cast<int>(cfg.get_int_or(
      "synthetic.id_offset", 0, 0, "id-offset must be >= 0"));
  world.seed = cfg.get_seed("synthetic.seed");
  world.validate();
  return world;
}

inline int run_features(const RunConfig& cfg) {
  if (cfg.positional != "synth")
    throw UsageError("features: expected mode 'synth'");
  const std::string out = cfg.get_str("paths.out", "out");
  const SyntheticWorldConfig world = synthetic_config(cfg);
  const int frames = static_cast<int>(
      cfg.get_int_or("synthetic.frames", 100, 1, "frames must be >= 1"));
  const std::string sequence = cfg.get_str_or("synthetic.sequence", "synth");

  const std::vector<Observation> pool = synth_pool(world, frames, sequence);
  store_features(pool, out);
  write_manifest(out, "features", {}, {out},
                 std::to_string(world.seed));
  std::cout << "wrote " << pool.size() << " feature records to " << out
            << "\n";
  return 0;
}

inline std::vector<Observation> load_pools(const RunConfig& cfg) {
  const std::vector<std::string> paths = cfg.get_list("paths.pool");
  if (paths.empty()) throw UsageError("missing required --pool");
  std::vector<Observation> pool;
  for (const std::string& path : paths) {
    std::vector<Observation> part = load_features(path);
    pool.insert(pool.end(), std::make_move_iterator(part.begin()),
                std::make_move_iterator(part.end()));
  }
  if (pool.empty()) throw DataError("pooled feature files are empty");
  const Eigen::Index n = pool.front().feature.size();
  for (const Observation& obs : pool)
    if (obs.feature.size() != n)
      throw DataError("pooled feature files disagree on the dimension n");
  return pool;
}

inline FactoryConfig factory_config(const RunConfig& cfg, int kind,
                                    std::uint64_t seed, int set_size) {
  FactoryConfig factory;
  factory.kind = tracklet_kind_from_int(kind);
  factory.set_size = set_size;
  factory.memory =
      static_cast<int>(cfg.get_int_or("factory.T", 5, 1, "T must be >= 1"));
  factory.max_gap =
      static_cast<int>(cfg.get_int_or("factory.F", 2, 2, "F must be >= 2"));
  factory.max_gapped_steps =
      static_cast<int>(cfg.get_int_or("factory.S", 1, 1, "S must be >= 1"));
  factory.max_intruders =
      static_cast<int>(cfg.get_int_or("factory.N", 1, 1, "N must be >= 1"));
  factory.seed = seed;
  factory.validate();
  return factory;
}

inline int run_tracklets(const RunConfig& cfg) {
  const int kind = static_cast<int>(
      cfg.get_int_or("factory.kind", 0, 1, "kind must be in 1..5"));
  if (kind > 5) throw UsageError("kind must be in 1..5");
  const std::string out = cfg.get_str("paths.out", "out");
  const std::vector<Observation> pool = load_pools(cfg);
  const int set_size = static_cast<int>(
      cfg.get_int_or("factory.M", 0, 1, "M must be >= 1"));
  const FactoryConfig factory =
      factory_config(cfg, kind, cfg.get_seed("factory.seed"), set_size);

  const std::vector<FeatureTracklet> set = generate_set(factory, pool);
  store_tracklets(set, out);
  write_manifest(out, "tracklets", cfg.get_list("paths.pool"), {out},
                 std::to_string(factory.seed));
  std::cout << "wrote " << set.size() << " tracklets to " << out << "\n";
  return 0;
}

inline int run_train(const RunConfig& cfg) {
  const std::string tracklets_path = cfg.get_str("paths.tracklets", "tracklets");
  const std::string out = cfg.get_str("paths.out", "out");
  const std::vector<FeatureTracklet> data = load_tracklets(tracklets_path);
  if (data.empty()) throw DataError("tracklet file is empty: " + tracklets_path);

  ModelConfig model_cfg;
  model_cfg.memory = data.front().memory();
  model_cfg.feature_dim =
      static_cast<int>(data.front().components.front().feature.size());
  model_cfg.hidden_size = static_cast<int>(
      cfg.get_int_or("model.H", 128, 1, "H must be >= 1"));
  model_cfg.validate();

  TrainConfig train_cfg;
  train_cfg.batch_size =
      static_cast<int>(cfg.get_int_or("train.B", 32, 1, "B must be >= 1"));
  train_cfg.iterations =
      static_cast<int>(cfg.get_int_or("train.IT", 1000, 1, "IT must be >= 1"));
  train_cfg.learning_rate =
      cfg.get_real_or("train.lr", 0.01, 0.0, "lr must be > 0");
  train_cfg.epsilon =
      cfg.get_real_or("train.eps", 1e-8, 0.0, "eps must be >= 0");
  train_cfg.init_scale = cfg.get_real_or("train.init_scale", 0.0, 0.0,
                                         "init-scale must be >= 0");
  train_cfg.seed = cfg.get_seed("train.seed");

  MsDoasModel model =
      init_model(model_cfg, train_cfg.seed, train_cfg.init_scale);
  const std::vector<double> trace = train(model, data, train_cfg);
  save_model(model, out);

  std::vector<std::string> outputs = {out};
  if (cfg.has("paths.trace")) {
    const std::string trace_path = cfg.get_str("paths.trace", "trace");
    std::string csv = "it,loss\n";
    for (std::size_t i = 0; i < trace.size(); ++i)
      csv += std::to_string(i + 1) + "," + format_g9(trace[i]) + "\n";
    std::ofstream f(trace_path, std::ios::trunc);
    if (!f) throw DataError("cannot open for writing: " + trace_path);
    f << csv;
    outputs.push_back(trace_path);
  }
  write_manifest(out, "train", {tracklets_path}, outputs,
                 std::to_string(train_cfg.seed));
  if (!trace.empty())
    std::cout << "final loss " << format_g9(trace.back()) << " after "
              << trace.size() << " iterations\n";
  return 0;
}

inline int run_eval(const RunConfig& cfg) {
  const std::string model_path = cfg.get_str("paths.model", "model");
  const std::string test_path = cfg.get_str("paths.test", "test");
  const std::string out = cfg.get_str("paths.out", "out");

  const MsDoasModel model = load_model(model_path);
  const std::vector<FeatureTracklet> test = load_tracklets(test_path);
  const EvalReport report = roc_sweep(model, test);
  emit_report_csv(report, out);
  std::vector<std::string> outputs = {out};
  if (cfg.has("paths.svg")) {
    const std::string svg = cfg.get_str("paths.svg", "svg");
    emit_report_svg(report, svg);
    outputs.push_back(svg);
  }
  write_manifest(out, "eval", {model_path, test_path}, outputs, "");
  std::cout << "samples " << report.sample_count << "\n";
  std::cout << "max F1 " << format_fixed(report.best_f1.f1, 4) << " at th="
            << format_fixed(report.best_f1.threshold, 2) << "\n";
  std::cout << "max A  " << format_fixed(report.best_accuracy.accuracy, 4)
            << " at th=" << format_fixed(report.best_accuracy.threshold, 2)
            << "\n";
  return 0;
}

inline int run_grid(const RunConfig& cfg) {
  const std::string out_dir = cfg.get_str("paths.out", "out");
  const std::vector<Observation> pool = load_pools(cfg);
  const std::uint64_t seed = cfg.get_seed("grid.seed");

  const std::int64_t train_m =
      cfg.get_int_or("factory.M", 1000, 1, "M must be >= 1");
  const std::int64_t test_m =
      cfg.get_int_or("factory.test_M", train_m, 1, "test-M must be >= 1");

  std::array<std::vector<FeatureTracklet>, 5> train_sets, test_sets;
  FactoryConfig base = factory_config(cfg, 1, seed, static_cast<int>(train_m));
  for (int i = 0; i < 5; ++i) {
    FactoryConfig fc = base;
    fc.kind = tracklet_kind_from_int(i + 1);
    fc.set_size = static_cast<int>(train_m);
    fc.seed = mix_seed(seed, 100 + static_cast<std::uint64_t>(i));
    train_sets[i] = generate_set(fc, pool);
    fc.set_size = static_cast<int>(test_m);
    fc.seed = mix_seed(seed, 200 + static_cast<std::uint64_t>(i));
    test_sets[i] = generate_set(fc, pool);
  }

  ModelConfig model_cfg;
  model_cfg.memory = base.memory;
  model_cfg.feature_dim = static_cast<int>(pool.front().feature.size());
  model_cfg.hidden_size =
      static_cast<int>(cfg.get_int_or("model.H", 64, 1, "H must be >= 1"));

  TrainConfig train_cfg;
  train_cfg.batch_size =
      static_cast<int>(cfg.get_int_or("train.B", 32, 1, "B must be >= 1"));
  train_cfg.iterations =
      static_cast<int>(cfg.get_int_or("train.IT", 1000, 1, "IT must be >= 1"));
  train_cfg.learning_rate =
      cfg.get_real_or("train.lr", 0.01, 0.0, "lr must be > 0");
  train_cfg.seed = seed;

  const GridResult grid =
      experiment_grid(train_sets, test_sets, model_cfg, train_cfg);

  std::filesystem::create_directories(out_dir);
  const auto cell_path = [&](int i, int j) {
    return out_dir + "/exp" + std::to_string(i + 1) + "_ts" +
           std::to_string(j + 1) + ".csv";
  };
  std::vector<std::string> outputs;
  for (int i = 0; i < 5; ++i) {
    save_model(grid.models[i], out_dir + "/exp" + std::to_string(i + 1) +
                                   ".model");
    outputs.push_back(out_dir + "/exp" + std::to_string(i + 1) + ".model");
    for (int j = 0; j < 5; ++j) {
      emit_report_csv(grid.reports[i][j], cell_path(i, j));
      outputs.push_back(cell_path(i, j));
    }
  }

  // long-form summary plus the two operating-point tables
  std::string summary = "exp,ts,max_f1,th_f1,max_a,th_a\n";
  std::string f1_table = "exp";
  std::string a_table = "exp";
  for (int j = 0; j < 5; ++j) {
    f1_table += ",TS" + std::to_string(j + 1);
    a_table += ",TS" + std::to_string(j + 1);
  }
  f1_table += '\n';
  a_table += '\n';
  for (int i = 0; i < 5; ++i) {
    f1_table += "Exp" + std::to_string(i + 1);
    a_table += "Exp" + std::to_string(i + 1);
    for (int j = 0; j < 5; ++j) {
      const EvalReport& r = grid.reports[i][j];
      summary += std::to_string(i + 1) + "," + std::to_string(j + 1) + "," +
                 format_fixed(r.best_f1.f1, 6) + "," +
                 format_fixed(r.best_f1.threshold, 2) + "," +
                 format_fixed(r.best_accuracy.accuracy, 6) + "," +
                 format_fixed(r.best_accuracy.threshold, 2) + "\n";
      f1_table += "," + format_fixed(r.best_f1.f1, 4) + "@" +
                  format_fixed(r.best_f1.threshold, 2);
      a_table += "," + format_fixed(r.best_accuracy.accuracy, 4) + "@" +
                 format_fixed(r.best_accuracy.threshold, 2);
    }
    f1_table += '\n';
    a_table += '\n';
  }
  const auto write_text = [&](const std::string& path, const std::string& s) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot open for writing: " + path);
    f << s;
    outputs.push_back(path);
  };
  write_text(out_dir + "/summary.csv", summary);
  write_text(out_dir + "/matrix_f1.csv", f1_table);
  write_text(out_dir + "/matrix_accuracy.csv", a_table);

  write_manifest(out_dir + "/summary.csv", "grid", cfg.get_list("paths.pool"),
                 outputs, std::to_string(seed));
  std::cout << a_table;
  return 0;
}

inline int run_track(const RunConfig& cfg) {
  const std::string det_path = cfg.get_str("paths.det", "det");
  const std::string feature_spec = cfg.get_str("paths.features", "features");
  const std::string model_path = cfg.get_str("paths.model", "model");
  const std::string out = cfg.get_str("paths.out", "out");

  const MsDoasModel model = load_model(model_path);
  const DetFile det_file = parse_det_file(det_path);
  if (det_file.skipped > 0)
    std::cerr << "warning: skipped " << det_file.skipped
              << " malformed detection rows\n";

  std::vector<Detection> dets;
  std::vector<std::string> inputs = {det_path, model_path};
  if (feature_spec == "synthetic:gt") {
    SyntheticWorldConfig world = synthetic_config(cfg);
    world.feature_dim = model.config.feature_dim;
    dets = attach_synthetic_features(det_file.rows, world);
  } else {
    const std::vector<Observation> records = load_features(feature_spec);
    if (!records.empty() &&
        records.front().feature.size() != model.config.feature_dim)
      throw DataError("feature file dimension " +
                      std::to_string(records.front().feature.size()) +
                      " does not match the model's n=" +
                      std::to_string(model.config.feature_dim));
    dets = attach_features_from_file(det_file.rows, records);
    inputs.push_back(feature_spec);
  }

  TrackerConfig tracker_cfg;
  tracker_cfg.memory = model.config.memory;
  tracker_cfg.appearance_weight = cfg.get_real_or(
      "tracker.lambda", 0.7, 0.0, "lambda must be in [0, 1]");
  if (tracker_cfg.appearance_weight > 1.0)
    throw UsageError("lambda must be in [0, 1]");
  tracker_cfg.association_threshold = cfg.get_real_or(
      "tracker.th_assoc", 0.5, 0.0, "th-assoc must be >= 0");
  tracker_cfg.iou_gate =
      cfg.get_real_or("tracker.iou_gate", 0.1, 0.0, "iou-gate must be >= 0");
  tracker_cfg.max_age = static_cast<int>(
      cfg.get_int_or("tracker.max_age", 30, 1, "max-age must be >= 1"));
  tracker_cfg.confirm_hits = static_cast<int>(cfg.get_int_or(
      "tracker.confirm_hits", 3, 1, "confirm-hits must be >= 1"));
  tracker_cfg.confidence_floor = cfg.get_real_or(
      "tracker.conf_floor", 0.3, 0.0, "conf-floor must be >= 0");
  tracker_cfg.validate();

  const std::vector<ResultRow> rows = run_sequence(dets, model, tracker_cfg);
  write_result_rows(rows, out);
  write_manifest(out, "track", inputs, {out}, "");
  std::cout << "wrote " << rows.size() << " result rows to " << out << "\n";
  return 0;
}

inline int run_score(const RunConfig& cfg) {
  if (cfg.has("paths.gt") || cfg.has("paths.hyp")) {
    const std::vector<std::string> gts = cfg.get_list("paths.gt");
    const std::vector<std::string> hyps = cfg.get_list("paths.hyp");
    if (gts.empty() || gts.size() != hyps.size())
      throw UsageError("score: --gt and --hyp must come in matching pairs");
    MetricsConfig metrics;
    metrics.iou_threshold =
        cfg.get_real_or("metrics.iou", 0.5, 0.0, "iou must be >= 0");

    std::vector<SequenceInput> sequences;
    for (std::size_t i = 0; i < gts.size(); ++i) {
      SequenceInput seq;
      seq.name = std::filesystem::path(gts[i]).stem().string();
      seq.gt = parse_gt_file(gts[i], metrics);
      seq.hyp = parse_hyp_file(hyps[i]);
      sequences.push_back(std::move(seq));
    }
    const MotReport report = score(sequences, metrics);

    const auto print_row = [](const SequenceScore& s) {
      std::cout << s.sequence << ": MOTA " << format_fixed(s.mota, 4)
                << "  FP " << s.fp << "  FN " << s.fn << "  IDsw " << s.idsw
                << "  IDF1 " << format_fixed(s.idf1, 4) << "  MT "
                << format_fixed(s.mt, 4) << "  ML " << format_fixed(s.ml, 4)
                << "\n";
    };
    for (const SequenceScore& s : report.sequences) print_row(s);
    print_row(report.global);
    std::cout << "P " << format_fixed(report.global.precision, 4) << "  R "
              << format_fixed(report.global.recall, 4) << "\n";

    if (cfg.has("paths.out")) {
      const std::string out = cfg.get_str("paths.out", "out");
      write_report_csv(report, out);
      std::vector<std::string> inputs = gts;
      inputs.insert(inputs.end(), hyps.begin(), hyps.end());
      write_manifest(out, "score", inputs, {out}, "");
    }
    return 0;
  }

  // similarity-score form
  const std::string model_path = cfg.get_str("paths.model", "model");
  const std::string det_path = cfg.get_str("paths.detection", "detection");
  const std::string hist_path = cfg.get_str("paths.history", "history");
  const MsDoasModel model = load_model(model_path);
  const std::vector<Observation> det_records = load_features(det_path);
  const std::vector<Observation> hist_records = load_features(hist_path);
  if (det_records.empty())
    throw DataError("detection feature file is empty: " + det_path);
  if (hist_records.empty())
    throw DataError("history feature file is empty: " + hist_path);
  if (static_cast<int>(hist_records.size()) > model.config.memory)
    throw DataError("history holds more than T=" +
                    std::to_string(model.config.memory) + " features");
  std::vector<FeatureVector> history;
  for (const Observation& obs : hist_records) history.push_back(obs.feature);
  std::cout << format_g9(
                   msdoas(model, det_records.front().feature, history))
            << "\n";
  return 0;
}

}  // namespace detail

// Dispatches a parsed run configuration; exceptions map onto exit codes.
inline int run(const RunConfig& cfg) {
  try {
    if (cfg.help || cfg.subcommand.empty()) {
      std::cout << detail::usage_text(cfg.subcommand) << "\n";
      return 0;
    }
    if (cfg.subcommand == "features") return detail::run_features(cfg);
    if (cfg.subcommand == "tracklets") return detail::run_tracklets(cfg);
    if (cfg.subcommand == "train") return detail::run_train(cfg);
    if (cfg.subcommand == "eval") return detail::run_eval(cfg);
    if (cfg.subcommand == "grid") return detail::run_grid(cfg);
    if (cfg.subcommand == "track") return detail::run_track(cfg);
    if (cfg.subcommand == "score") return detail::run_score(cfg);
    throw UsageError("unknown subcommand '" + cfg.subcommand + "'");
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    std::cerr << detail::usage_text(cfg.subcommand) << "\n";
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace msdoas
