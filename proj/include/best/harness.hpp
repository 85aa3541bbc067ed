#pragma once

// Experiment harness: INI configuration, scenario runs, the loss-curve and
// accuracy-sweep experiments, and the VRI feedback hook.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <array>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "best/assessment.hpp"
#include "best/system.hpp"

namespace best {

// ---------------------------------------------------------------------------
// Configuration

struct ModelConfig {
  Architecture arch = Architecture::Lstm2;
  std::size_t hidden = 32;
  double dropout = 0.2;
  TrainConfig train;
};

struct ExperimentConfig {
  SimulationConfig sim;
  bool seed_in_file = false;
  std::string output_dir = "out";
  std::size_t replicates = 5;
  std::uint32_t fig5_malicious = 50;
  std::vector<std::uint32_t> sweep = {0, 25, 50, 75, 100};
  ModelConfig model;
  Thresholds thresholds;
  double test_fraction = 0.2;
  bool feedback = false;
  std::string feedback_model;

  std::uint64_t seed() const { return sim.world.seed; }
};

namespace detail {

using boost::property_tree::ptree;

inline const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> k = {
      {"run", {"seed", "duration", "store", "output_dir", "replicates", "event_log"}},
      {"world",
       {"cavs", "rsus", "malicious", "mix", "area_m", "neighbor_radius_m", "v_max_kmh", "a_max", "overspeed_min",
        "overspeed_max", "replay_lag_s"}},
      {"ledger", {"block_limit"}},
      {"consensus", {"committee_size", "r_crn", "r_orn", "penalty", "k_miss", "deposits"}},
      {"network",
       {"vehicle_latency_ms", "rsu_latency_ms", "jitter_ms", "drop_probability", "collect_ms", "propose_ms",
        "round_timer_ms"}},
      {"model", {"architecture", "hidden", "dropout", "iterations", "batch", "learning_rate"}},
      {"assessment", {"alpha", "beta", "test_fraction", "feedback", "model"}},
      {"faults", {"script"}},
      {"sweep", {"malicious_counts", "fig5_malicious"}},
  };
  return k;
}

class Reader {
 public:
  explicit Reader(const ptree& root) : root_(root) {}

  std::optional<std::string> raw(const std::string& sec, const std::string& key) const {
    auto s = root_.get_child_optional(sec);
    if (!s) return std::nullopt;
    auto v = s->get_optional<std::string>(ptree::path_type(key, '\0'));
    if (!v) return std::nullopt;
    return *v;
  }

  template <typename T>
  void get(const std::string& sec, const std::string& key, T& out) const {
    auto v = raw(sec, key);
    if (!v) return;
    out = parse<T>(sec + "." + key, trim(*v));
  }

  template <typename T>
  static T parse(const std::string& field, const std::string& v) {
    auto fail = [&](const char* what) -> T {
      throw ConfigInvalid(field + ": expected " + what + ", got '" + v + "'");
    };
    if constexpr (std::is_same_v<T, bool>) {
      if (v == "true" || v == "1" || v == "yes") return true;
      if (v == "false" || v == "0" || v == "no") return false;
      return fail("true or false");
    } else if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else if constexpr (std::is_floating_point_v<T>) {
      std::size_t pos = 0;
      double d = 0;
      try {
        d = std::stod(v, &pos);
      } catch (const std::logic_error&) {
        return fail("a number");
      }
      if (pos != v.size() || !std::isfinite(d)) return fail("a number");
      return static_cast<T>(d);
    } else {
      if (v.empty() || v[0] == '-') return fail("a non-negative integer");
      std::size_t pos = 0;
      unsigned long long n = 0;
      try {
        n = std::stoull(v, &pos);
      } catch (const std::logic_error&) {
        return fail("a non-negative integer");
      }
      if (pos != v.size() || n > std::numeric_limits<T>::max()) return fail("a non-negative integer");
      return static_cast<T>(n);
    }
  }

  template <typename T>
  std::optional<std::vector<T>> list(const std::string& sec, const std::string& key) const {
    auto v = raw(sec, key);
    if (!v) return std::nullopt;
    std::vector<T> out;
    std::stringstream ss(*v);
    for (std::string item; std::getline(ss, item, ',');) {
      item = trim(item);
      if (!item.empty()) out.push_back(parse<T>(sec + "." + key, item));
    }
    return out;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

 private:
  const ptree& root_;
};

inline std::int64_t tokens_to_micro(const std::string& field, double t) {
  if (t < 0) throw ConfigInvalid(field + ": must be non-negative");
  return static_cast<std::int64_t>(std::llround(t * static_cast<double>(kMicroTokens)));
}

inline SimTime millis_field(const std::string& field, double ms) {
  if (ms < 0) throw ConfigInvalid(field + ": must be non-negative");
  return SimTime::micros(static_cast<std::int64_t>(std::llround(ms * 1000.0)));
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  const auto& w = c.sim.world;
  if (w.rsu_count < 4) throw ConfigInvalid("world.rsus: need at least 4 RSUs");
  if (w.cav_count < 1) throw ConfigInvalid("world.cavs: need at least one CAV");
  if (!(w.area_m > 0)) throw ConfigInvalid("world.area_m: must be positive");
  if (!(w.limits.v_max > 0)) throw ConfigInvalid("world.v_max_kmh: must be positive");
  if (!(w.limits.a_max > 0)) throw ConfigInvalid("world.a_max: must be positive");
  if (!(w.overspeed_min >= 1.0 && w.overspeed_max >= w.overspeed_min))
    throw ConfigInvalid("world.overspeed_min/max: need 1 <= min <= max");
  const auto& mix = w.mix;
  if (mix.unregistered < 0 || mix.implausible < 0 || mix.replay < 0 ||
      mix.unregistered + mix.implausible + mix.replay <= 0)
    throw ConfigInvalid("world.mix: need three non-negative weights with a positive sum");
  const std::size_t m = c.sim.consensus.committee_size;
  if (m < 4) throw ConfigInvalid("consensus.committee_size: must be at least 4");
  if (m > w.rsu_count) throw ConfigInvalid("consensus.committee_size: exceeds world.rsus");
  if (!c.sim.consensus.deposits.empty() && c.sim.consensus.deposits.size() != w.rsu_count)
    throw ConfigInvalid("consensus.deposits: need exactly one entry per RSU");
  if (c.sim.consensus.rewards.k_miss < 1) throw ConfigInvalid("consensus.k_miss: must be at least 1");
  if (c.sim.duration_s < 1) throw ConfigInvalid("run.duration: must be at least 1 second");
  const auto& n = c.sim.network;
  for (const auto* l : {&n.vehicle_link, &n.rsu_link})
    if (!(l->drop_probability >= 0 && l->drop_probability <= 1))
      throw ConfigInvalid("network.drop_probability: must be in [0, 1]");
  if (n.round_timer <= n.propose_delay) throw ConfigInvalid("network.round_timer_ms: must exceed propose_ms");
  if (n.round_timer > SimTime::seconds(1)) throw ConfigInvalid("network.round_timer_ms: at most 1000");
  if (c.sim.block_limit < empty_block_size()) throw ConfigInvalid("ledger.block_limit: smaller than an empty block");
  if (c.model.hidden < 1) throw ConfigInvalid("model.hidden: must be positive");
  if (!(c.model.dropout >= 0 && c.model.dropout < 1)) throw ConfigInvalid("model.dropout: must be in [0, 1)");
  if (c.model.train.epochs < 1) throw ConfigInvalid("model.iterations: must be at least 1");
  if (c.model.train.batch < 1) throw ConfigInvalid("model.batch: must be at least 1");
  if (!(c.model.train.lr > 0)) throw ConfigInvalid("model.learning_rate: must be positive");
  c.thresholds.validate();
  if (!(c.test_fraction > 0 && c.test_fraction < 1)) throw ConfigInvalid("assessment.test_fraction: must be in (0, 1)");
  if (c.replicates < 1) throw ConfigInvalid("run.replicates: must be at least 1");
  if (c.sweep.empty()) throw ConfigInvalid("sweep.malicious_counts: must not be empty");
  for (const auto& a : c.sim.faults.actions) {
    if (a.node >= w.rsu_count)
      throw ConfigInvalid("faults.script: node " + std::to_string(a.node) + " is not an RSU");
    if (a.kind == FaultKind::Byzantine) parse_byzantine_mode(a.mode);
  }
  if (c.feedback && c.feedback_model.empty())
    throw ConfigInvalid("assessment.model: feedback needs a model file");
}

// Parses INI text. Unknown sections and keys are errors so that typos do not
// silently fall back to defaults.
inline ExperimentConfig parse_config(std::istream& is, const std::string& origin = "<config>") {
  detail::ptree root;
  try {
    boost::property_tree::ini_parser::read_ini(is, root);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigInvalid(origin + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  const auto& known = detail::known_keys();
  for (const auto& [sec, body] : root) {
    auto it = known.find(sec);
    if (it == known.end()) throw ConfigInvalid(origin + ": unknown section [" + sec + "]");
    if (body.empty() && !body.data().empty()) throw ConfigInvalid(origin + ": '" + sec + "' outside any section");
    for (const auto& [key, v] : body)
      if (!it->second.count(key)) throw ConfigInvalid(origin + ": unknown key " + sec + "." + key);
  }

  ExperimentConfig c;
  const detail::Reader r(root);
  auto& w = c.sim.world;
  if (r.raw("run", "seed")) {
    r.get("run", "seed", w.seed);
    c.seed_in_file = true;
  }
  r.get("run", "duration", c.sim.duration_s);
  if (auto s = r.raw("run", "store")) {
    const auto v = detail::Reader::trim(*s);
    if (v == "blockchain") c.sim.store = StoreKind::Blockchain;
    else if (v == "central") c.sim.store = StoreKind::Central;
    else throw ConfigInvalid("run.store: expected blockchain or central, got '" + v + "'");
  }
  r.get("run", "output_dir", c.output_dir);
  r.get("run", "replicates", c.replicates);
  r.get("run", "event_log", c.sim.keep_event_log);

  r.get("world", "cavs", w.cav_count);
  r.get("world", "rsus", w.rsu_count);
  r.get("world", "malicious", w.malicious_count);
  if (auto mix = r.list<double>("world", "mix")) {
    if (mix->size() != 3) throw ConfigInvalid("world.mix: expected unregistered, implausible, replay weights");
    w.mix = {(*mix)[0], (*mix)[1], (*mix)[2]};
  }
  r.get("world", "area_m", w.area_m);
  r.get("world", "neighbor_radius_m", w.neighbor_radius_m);
  if (auto v = r.raw("world", "v_max_kmh")) {
    w.limits.v_max = detail::Reader::parse<double>("world.v_max_kmh", detail::Reader::trim(*v)) / 3.6;
    w.initial_speed_max = w.limits.v_max;
  }
  r.get("world", "a_max", w.limits.a_max);
  r.get("world", "overspeed_min", w.overspeed_min);
  r.get("world", "overspeed_max", w.overspeed_max);
  r.get("world", "replay_lag_s", w.replay_lag_s);

  r.get("ledger", "block_limit", c.sim.block_limit);

  auto& cc = c.sim.consensus;
  r.get("consensus", "committee_size", cc.committee_size);
  auto tokens = [&](const char* key, std::int64_t& out) {
    if (!r.raw("consensus", key)) return;
    double t = 0;
    r.get("consensus", key, t);
    out = detail::tokens_to_micro(std::string("consensus.") + key, t);
  };
  tokens("r_crn", cc.rewards.r_crn);
  tokens("r_orn", cc.rewards.r_orn);
  tokens("penalty", cc.rewards.penalty);
  r.get("consensus", "k_miss", cc.rewards.k_miss);
  if (auto d = r.list<std::uint64_t>("consensus", "deposits")) cc.deposits = *d;

  auto& n = c.sim.network;
  auto ms = [&](const char* key, SimTime& out) {
    if (!r.raw("network", key)) return;
    double v = 0;
    r.get("network", key, v);
    out = detail::millis_field(std::string("network.") + key, v);
  };
  ms("vehicle_latency_ms", n.vehicle_link.latency);
  ms("rsu_latency_ms", n.rsu_link.latency);
  ms("jitter_ms", n.rsu_link.jitter);
  n.vehicle_link.jitter = n.rsu_link.jitter;
  r.get("network", "drop_probability", n.rsu_link.drop_probability);
  n.vehicle_link.drop_probability = n.rsu_link.drop_probability;
  ms("collect_ms", n.collect_delay);
  ms("propose_ms", n.propose_delay);
  ms("round_timer_ms", n.round_timer);

  if (auto a = r.raw("model", "architecture")) {
    const auto v = detail::Reader::trim(*a);
    if (v == "lstm") c.model.arch = Architecture::Lstm2;
    else if (v == "dnn") c.model.arch = Architecture::Dnn4;
    else throw ConfigInvalid("model.architecture: expected lstm or dnn, got '" + v + "'");
  }
  r.get("model", "hidden", c.model.hidden);
  r.get("model", "dropout", c.model.dropout);
  r.get("model", "iterations", c.model.train.epochs);
  r.get("model", "batch", c.model.train.batch);
  r.get("model", "learning_rate", c.model.train.lr);

  r.get("assessment", "alpha", c.thresholds.alpha);
  r.get("assessment", "beta", c.thresholds.beta);
  r.get("assessment", "test_fraction", c.test_fraction);
  r.get("assessment", "feedback", c.feedback);
  r.get("assessment", "model", c.feedback_model);

  if (auto s = r.raw("faults", "script")) c.sim.faults = FaultScript::parse(*s);

  if (auto l = r.list<std::uint32_t>("sweep", "malicious_counts")) c.sweep = *l;
  r.get("sweep", "fig5_malicious", c.fig5_malicious);

  validate(c);
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigInvalid("cannot open config file '" + path + "'");
  auto c = parse_config(f, path);
  // Relative model paths are taken relative to the config file.
  if (!c.feedback_model.empty() && std::filesystem::path(c.feedback_model).is_relative())
    c.feedback_model = (std::filesystem::path(path).parent_path() / c.feedback_model).string();
  return c;
}

// Seed precedence: command line, then the config file, then BEST_SEED.
inline void resolve_seed(ExperimentConfig& c, std::optional<std::uint64_t> cli) {
  if (cli) {
    c.sim.world.seed = *cli;
    return;
  }
  if (c.seed_in_file) return;
  if (const char* env = std::getenv("BEST_SEED"); env && *env)
    c.sim.world.seed = detail::Reader::parse<std::uint64_t>("BEST_SEED", env);
}

// ---------------------------------------------------------------------------
// Schemes and metrics

enum class Scheme : std::uint8_t { LstmBlockchain = 0, DnnBlockchain = 1, LstmCentral = 2, DnnCentral = 3 };
inline constexpr std::array<Scheme, 4> kSchemes = {Scheme::LstmBlockchain, Scheme::DnnBlockchain,
                                                   Scheme::LstmCentral, Scheme::DnnCentral};

inline const char* to_string(Scheme s) {
  static constexpr const char* kNames[] = {"lstm_blockchain", "dnn_blockchain", "lstm_central", "dnn_central"};
  return kNames[static_cast<std::size_t>(s)];
}
inline Architecture architecture_of(Scheme s) {
  return s == Scheme::LstmBlockchain || s == Scheme::LstmCentral ? Architecture::Lstm2 : Architecture::Dnn4;
}
inline StoreKind store_of(Scheme s) {
  return s == Scheme::LstmBlockchain || s == Scheme::DnnBlockchain ? StoreKind::Blockchain : StoreKind::Central;
}

inline constexpr std::array<AdmissionVerdict, 4> kRejectVerdicts = {
    AdmissionVerdict::RejectUnknownIdentity, AdmissionVerdict::RejectBadSignature, AdmissionVerdict::RejectImplausible,
    AdmissionVerdict::RejectStale};

struct MetricsRow {
  std::string scheme;
  std::uint32_t malicious_count = 0;
  std::string point;  // iteration or sweep point
  std::optional<double> loss;
  std::optional<double> accuracy;
  std::uint64_t blocks_finalized = 0;
  std::map<AdmissionVerdict, std::uint64_t> rejected;
  std::uint64_t signaling = 0;
  double wall_s = 0.0;
};

inline std::string fmt(double v, const char* f = "%.6f") {
  char buf[48];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Wall-clock seconds go to a separate file so that the metrics file is a
// pure function of the configuration.
inline void write_metrics(const std::filesystem::path& dir, const std::vector<MetricsRow>& rows) {
  std::ofstream m(dir / "metrics.csv"), t(dir / "timing.csv");
  m << "scheme,malicious_count,point,loss,accuracy,blocks_finalized";
  for (auto v : kRejectVerdicts) m << ',' << to_string(v);
  m << ",signaling_msgs\n";
  t << "scheme,malicious_count,point,wall_s\n";
  for (const auto& r : rows) {
    m << r.scheme << ',' << r.malicious_count << ',' << r.point << ',' << (r.loss ? fmt(*r.loss) : "") << ','
      << (r.accuracy ? fmt(*r.accuracy) : "") << ',' << r.blocks_finalized;
    for (auto v : kRejectVerdicts) {
      auto it = r.rejected.find(v);
      m << ',' << (it == r.rejected.end() ? 0 : it->second);
    }
    m << ',' << r.signaling << '\n';
    t << r.scheme << ',' << r.malicious_count << ',' << r.point << ',' << fmt(r.wall_s, "%.3f") << '\n';
  }
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Feedback: before each round, every vehicle with stored history gets its
// current VRI attached to its next record.

inline FeedbackHook make_feedback_hook(std::shared_ptr<const ModelParams> model, Thresholds th) {
  return [model = std::move(model), th](const Chain& store, World& world, std::int64_t) {
    for (std::uint32_t i = 0; i < world.vehicles().size(); ++i) {
      const PublicKey key = world.vehicles()[i].key();
      if (!store.latest(key)) continue;
      world.set_prior_vri(i, assess(*model, store, key, th).report.vri);
    }
  };
}

inline ModelParams load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigInvalid("cannot open model file '" + path + "'");
  const Bytes b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_model(b);
}

inline void save_model(const std::string& path, const ModelParams& p) {
  const Bytes b = serialize_model(p);
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

// ---------------------------------------------------------------------------
// Scenario

struct ScenarioRun {
  SimulationResult sim;
  std::vector<LabeledSequence> dataset;
  DatasetSplit split;
  std::vector<LabeledSequence> honest_test;
  double wall_s = 0.0;

  std::uint64_t signaling() const {
    std::uint64_t n = 0;
    for (const auto& r : sim.rounds) n += r.signaling();
    return n;
  }
  std::size_t forged_in_train() const {
    std::size_t n = 0;
    for (const auto& q : split.train) n += sim.malicious_keys.count(q.vehicle);
    return n;
  }
};

inline SimulationConfig scenario_config(const ExperimentConfig& cfg, StoreKind store, std::uint32_t malicious,
                                        std::uint64_t seed) {
  SimulationConfig s = cfg.sim;
  s.store = store;
  s.world.malicious_count = malicious;
  s.world.seed = seed;
  return s;
}

inline ScenarioRun run_scenario(const SimulationConfig& sim, double test_fraction, FeedbackHook feedback = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  ScenarioRun run;
  run.sim = run_simulation(sim, std::move(feedback));
  run.dataset = prepare_dataset(run.sim.store);
  run.split = split_dataset(run.dataset, sim.world.seed, test_fraction);
  run.honest_test = without_vehicles(run.split.test, run.sim.malicious_keys);
  run.wall_s = seconds_since(t0);
  return run;
}

inline void write_chain_file(const std::filesystem::path& path, const Chain& chain) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  write_chain_jsonl(f, chain);
}

inline TrainResult train_scheme(const ExperimentConfig& cfg, Scheme s, const ScenarioRun& run, std::uint64_t seed) {
  TrainConfig tc = cfg.model.train;
  tc.seed = seed;
  return train(init_model(architecture_of(s), cfg.model.hidden, cfg.model.dropout, seed), run.split.train, tc);
}

inline MetricsRow scenario_row(const std::string& scheme, std::uint32_t malicious, const std::string& point,
                               const ScenarioRun& run) {
  MetricsRow m;
  m.scheme = scheme;
  m.malicious_count = malicious;
  m.point = point;
  m.blocks_finalized = run.sim.blocks_finalized;
  m.rejected = run.sim.rejected;
  m.signaling = run.signaling();
  m.wall_s = run.wall_s;
  return m;
}

// ---------------------------------------------------------------------------
// Loss curves: each replicate seed runs both stores with the configured
// number of forgers, trains all four schemes, and the per-iteration training
// loss is averaged over replicates.

struct Fig5Result {
  std::array<std::vector<double>, 4> mean_loss;
  std::vector<std::uint64_t> seeds;
  std::vector<std::array<double, 4>> final_loss;  // per seed
  std::vector<std::array<std::size_t, 4>> forged_in_train;
  std::vector<std::string> chain_files;
  double wall_s = 0.0;
};

inline Fig5Result reproduce_loss_curves(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                        std::ostream* progress = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  std::filesystem::create_directories(out);
  Fig5Result res;
  std::vector<MetricsRow> rows;
  std::ofstream runs(out / "fig5_runs.csv"), audit(out / "fig5_audit.csv");
  runs << "seed,scheme,iteration,loss\n";
  audit << "seed,scheme,train_sequences,forged_sequences\n";
  const std::size_t iters = cfg.model.train.epochs;
  for (auto& m : res.mean_loss) m.assign(iters, 0.0);
  for (std::size_t k = 0; k < cfg.replicates; ++k) {
    const std::uint64_t seed = cfg.seed() + k;
    res.seeds.push_back(seed);
    std::map<StoreKind, ScenarioRun> scen;
    for (StoreKind store : {StoreKind::Blockchain, StoreKind::Central}) {
      scen[store] = run_scenario(scenario_config(cfg, store, cfg.fig5_malicious, seed), cfg.test_fraction);
      const auto file = out / "chains" / ("fig5_seed" + std::to_string(seed) + "_" + to_string(store) + ".jsonl");
      write_chain_file(file, scen[store].sim.store);
      res.chain_files.push_back(file.string());
    }
    std::array<double, 4> finals{};
    std::array<std::size_t, 4> forged{};
    for (Scheme s : kSchemes) {
      const auto& run = scen[store_of(s)];
      const auto t1 = std::chrono::steady_clock::now();
      const TrainResult tr = train_scheme(cfg, s, run, seed);
      const auto i = static_cast<std::size_t>(s);
      for (std::size_t it = 0; it < iters; ++it) {
        res.mean_loss[i][it] += tr.loss_trace[it] / static_cast<double>(cfg.replicates);
        runs << seed << ',' << to_string(s) << ',' << it + 1 << ',' << fmt(tr.loss_trace[it]) << '\n';
      }
      finals[i] = tr.loss_trace.back();
      forged[i] = run.forged_in_train();
      audit << seed << ',' << to_string(s) << ',' << run.split.train.size() << ',' << forged[i] << '\n';
      MetricsRow row = scenario_row(to_string(s), cfg.fig5_malicious, "seed" + std::to_string(seed), run);
      row.loss = finals[i];
      row.wall_s = run.wall_s + seconds_since(t1);
      rows.push_back(std::move(row));
      if (progress)
        *progress << "fig5 seed " << seed << ' ' << to_string(s) << " final loss " << fmt(finals[i], "%.4f") << '\n';
    }
    res.final_loss.push_back(finals);
    res.forged_in_train.push_back(forged);
  }
  std::ofstream csv(out / "fig5.csv");
  csv << "iteration";
  for (Scheme s : kSchemes) csv << ',' << to_string(s);
  csv << '\n';
  for (std::size_t it = 0; it < iters; ++it) {
    csv << it + 1;
    for (const auto& m : res.mean_loss) csv << ',' << fmt(m[it]);
    csv << '\n';
  }
  write_metrics(out, rows);
  res.wall_s = seconds_since(t0);
  return res;
}

// ---------------------------------------------------------------------------
// Accuracy sweep: for each forger count, fresh runs of both stores, four
// trained schemes, accuracy on the honest held-out vehicles.

struct Fig6Result {
  std::vector<std::uint32_t> counts;
  std::vector<std::array<double, 4>> accuracy;
  std::vector<std::string> chain_files;
  double wall_s = 0.0;
};

inline Fig6Result reproduce_accuracy_sweep(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                           std::ostream* progress = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  std::filesystem::create_directories(out);
  Fig6Result res;
  std::vector<MetricsRow> rows;
  std::ofstream conf(out / "fig6_confusion.csv");
  conf << "malicious_count,scheme,true_level,predicted_level,count\n";
  for (std::uint32_t count : cfg.sweep) {
    std::map<StoreKind, ScenarioRun> scen;
    for (StoreKind store : {StoreKind::Blockchain, StoreKind::Central}) {
      scen[store] = run_scenario(scenario_config(cfg, store, count, cfg.seed()), cfg.test_fraction);
      const auto file = out / "chains" / ("fig6_m" + std::to_string(count) + "_" + to_string(store) + ".jsonl");
      write_chain_file(file, scen[store].sim.store);
      res.chain_files.push_back(file.string());
    }
    std::array<double, 4> acc{};
    for (Scheme s : kSchemes) {
      const auto& run = scen[store_of(s)];
      const auto t1 = std::chrono::steady_clock::now();
      const TrainResult tr = train_scheme(cfg, s, run, cfg.seed());
      const Evaluation ev = evaluate(tr.params, run.honest_test);
      acc[static_cast<std::size_t>(s)] = ev.accuracy;
      for (std::size_t a = 0; a < kClasses; ++a)
        for (std::size_t b = 0; b < kClasses; ++b)
          conf << count << ',' << to_string(s) << ',' << to_string(static_cast<RiskLevel>(a)) << ','
               << to_string(static_cast<RiskLevel>(b)) << ',' << ev.confusion[a][b] << '\n';
      MetricsRow row = scenario_row(to_string(s), count, std::to_string(count), run);
      row.loss = tr.loss_trace.back();
      row.accuracy = ev.accuracy;
      row.wall_s = run.wall_s + seconds_since(t1);
      rows.push_back(std::move(row));
      if (progress)
        *progress << "fig6 malicious " << count << ' ' << to_string(s) << " accuracy " << fmt(ev.accuracy, "%.4f")
                  << '\n';
    }
    res.counts.push_back(count);
    res.accuracy.push_back(acc);
  }
  std::ofstream csv(out / "fig6.csv");
  csv << "malicious_count";
  for (Scheme s : kSchemes) csv << ',' << to_string(s);
  csv << '\n';
  for (std::size_t i = 0; i < res.counts.size(); ++i) {
    csv << res.counts[i];
    for (double a : res.accuracy[i]) csv << ',' << fmt(a);
    csv << '\n';
  }
  write_metrics(out, rows);
  res.wall_s = seconds_since(t0);
  return res;
}

}  // namespace best
