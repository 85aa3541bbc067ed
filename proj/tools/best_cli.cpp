// best: command-line front end for the simulator, models and experiments.
//
// Exit codes: 0 success, 1 configuration or input error, 2 invariant
// violation (corrupt chain, safety failure, diverged training).

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>

#include "best/harness.hpp"

namespace fs = std::filesystem;
using namespace best;

namespace {

struct Usage : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct Violation : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg;
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) throw ConfigInvalid("config file not found: " + c.config);
    cfg = load_config(c.config);
  }
  resolve_seed(cfg, c.seed);
  if (!c.out.empty()) cfg.output_dir = c.out;
  return cfg;
}

std::ofstream open_out(const fs::path& p) {
  fs::create_directories(p.parent_path().empty() ? fs::path(".") : p.parent_path());
  std::ofstream f(p);
  if (!f) throw ConfigInvalid("cannot write " + p.string());
  return f;
}

std::shared_ptr<const ModelParams> feedback_model(const ExperimentConfig& cfg) {
  if (!cfg.feedback) return nullptr;
  return std::make_shared<const ModelParams>(load_model(cfg.feedback_model));
}

// ---------------------------------------------------------------------------

int cmd_simulate(const Common& c) {
  const ExperimentConfig cfg = load(c);
  const fs::path out = cfg.output_dir;
  FeedbackHook hook;
  if (auto m = feedback_model(cfg)) hook = make_feedback_hook(m, cfg.thresholds);
  const ScenarioRun run = run_scenario(cfg.sim, cfg.test_fraction, hook);
  const auto& res = run.sim;

  {
    auto f = open_out(out / "chain.jsonl");
    write_chain_jsonl(f, res.store);
  }
  if (cfg.sim.keep_event_log) {
    auto f = open_out(out / "events.jsonl");
    for (const auto& e : res.event_log) f << to_jsonl(e) << '\n';
  }
  {
    auto f = open_out(out / "rounds.csv");
    write_rounds_csv(f, res.rounds);
  }
  {
    auto f = open_out(out / "tokens.csv");
    f << "round,rsu,delta_micro,reason\n";
    for (const auto& e : res.tokens.history) f << e.round << ',' << e.rsu << ',' << e.delta << ',' << e.reason << '\n';
  }
  write_metrics(out, {scenario_row(to_string(cfg.sim.store), cfg.sim.world.malicious_count, "simulate", run)});

  std::cout << "store " << to_string(cfg.sim.store) << ", seed " << cfg.seed() << ", " << cfg.sim.duration_s
            << " s\n";
  std::cout << "blocks finalized " << res.blocks_finalized << ", records stored " << res.store.record_count()
            << ", emitted " << res.emitted_records << " (forged " << res.forged_records << ")\n";
  for (auto v : kRejectVerdicts) {
    auto it = res.rejected.find(v);
    std::cout << to_string(v) << ' ' << (it == res.rejected.end() ? 0 : it->second) << '\n';
  }
  std::cout << "signaling messages " << run.signaling() << '\n';
  std::cout << "output " << out.string() << '\n';

  auto problems = audit_chain(res.store);
  for (const auto& v : res.safety_violations) problems.push_back("safety: " + v);
  if (!problems.empty()) {
    for (const auto& p : problems) std::cerr << "violation: " << p << '\n';
    throw Violation(std::to_string(problems.size()) + " invariant violation(s)");
  }
  return 0;
}

int cmd_train(const Common& c, const std::string& arch) {
  ExperimentConfig cfg = load(c);
  if (arch == "lstm") cfg.model.arch = Architecture::Lstm2;
  else if (arch == "dnn") cfg.model.arch = Architecture::Dnn4;
  else if (!arch.empty()) throw ConfigInvalid("--arch: expected lstm or dnn");
  const fs::path out = cfg.output_dir;
  const ScenarioRun run = run_scenario(cfg.sim, cfg.test_fraction);
  if (run.split.train.empty()) throw ConfigInvalid("training split is empty; increase run.duration or world.cavs");
  TrainConfig tc = cfg.model.train;
  tc.seed = cfg.seed();
  const TrainResult tr =
      train(init_model(cfg.model.arch, cfg.model.hidden, cfg.model.dropout, cfg.seed()), run.split.train, tc);
  fs::create_directories(out);
  save_model((out / "model.bin").string(), tr.params);
  {
    auto f = open_out(out / "loss.csv");
    f << "iteration,loss\n";
    for (std::size_t i = 0; i < tr.loss_trace.size(); ++i) f << i + 1 << ',' << fmt(tr.loss_trace[i]) << '\n';
  }
  {
    auto f = open_out(out / "train.csv");
    write_dataset_csv(f, run.split.train);
  }
  {
    auto f = open_out(out / "test.csv");
    write_dataset_csv(f, run.honest_test);
  }
  std::cout << to_string(cfg.model.arch) << " on " << to_string(cfg.sim.store) << ": " << run.split.train.size()
            << " training sequences (" << run.forged_in_train() << " from forgers), final loss "
            << fmt(tr.loss_trace.back(), "%.4f") << '\n';
  std::cout << "model " << (out / "model.bin").string() << '\n';
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& model_path) {
  const ExperimentConfig cfg = load(c);
  const ModelParams model = load_model(model_path);
  const fs::path out = cfg.output_dir;
  const ScenarioRun run = run_scenario(cfg.sim, cfg.test_fraction);
  if (run.honest_test.empty()) throw ConfigInvalid("test split is empty; increase run.duration or world.cavs");
  const Evaluation ev = evaluate(model, run.honest_test);
  {
    auto f = open_out(out / "confusion.csv");
    f << "true_level,predicted_level,count\n";
    for (std::size_t a = 0; a < kClasses; ++a)
      for (std::size_t b = 0; b < kClasses; ++b)
        f << to_string(static_cast<RiskLevel>(a)) << ',' << to_string(static_cast<RiskLevel>(b)) << ','
          << ev.confusion[a][b] << '\n';
  }
  std::set<PublicKey> vehicles;
  for (const auto& q : run.honest_test) vehicles.insert(q.vehicle);
  std::map<Countermeasure, std::size_t> actions;
  {
    auto f = open_out(out / "assessments.csv");
    f << "vehicle,vri,predicted_level,countermeasure\n";
    for (const auto& v : vehicles) {
      const Assessment a = assess(model, run.sim.store, v, cfg.thresholds);
      ++actions[a.countermeasure];
      f << v.hex() << ',' << fmt(a.report.vri) << ',' << to_string(a.report.predicted_level) << ','
        << to_string(a.countermeasure) << '\n';
    }
  }
  std::cout << "accuracy " << fmt(ev.accuracy, "%.4f") << " on " << ev.total << " honest test sequences\n";
  std::cout << "true\\pred";
  for (std::size_t b = 0; b < kClasses; ++b) std::cout << ' ' << to_string(static_cast<RiskLevel>(b));
  std::cout << '\n';
  for (std::size_t a = 0; a < kClasses; ++a) {
    std::cout << to_string(static_cast<RiskLevel>(a));
    for (std::size_t b = 0; b < kClasses; ++b) std::cout << ' ' << ev.confusion[a][b];
    std::cout << '\n';
  }
  for (auto cm : {Countermeasure::None, Countermeasure::Warning, Countermeasure::Suspension})
    std::cout << to_string(cm) << ' ' << actions[cm] << '\n';
  return 0;
}

int cmd_fig5(const Common& c) {
  const ExperimentConfig cfg = load(c);
  const Fig5Result r = reproduce_loss_curves(cfg, cfg.output_dir, &std::cerr);
  std::cout << "mean final loss over " << r.seeds.size() << " seeds, " << cfg.fig5_malicious << " malicious\n";
  for (Scheme s : kSchemes)
    std::cout << to_string(s) << ' ' << fmt(r.mean_loss[static_cast<std::size_t>(s)].back(), "%.4f") << '\n';
  std::cout << "output " << cfg.output_dir << '\n';
  return 0;
}

int cmd_fig6(const Common& c) {
  const ExperimentConfig cfg = load(c);
  const Fig6Result r = reproduce_accuracy_sweep(cfg, cfg.output_dir, &std::cerr);
  std::cout << "malicious";
  for (Scheme s : kSchemes) std::cout << ' ' << to_string(s);
  std::cout << '\n';
  for (std::size_t i = 0; i < r.counts.size(); ++i) {
    std::cout << r.counts[i];
    for (double a : r.accuracy[i]) std::cout << ' ' << fmt(100 * a, "%.1f");
    std::cout << '\n';
  }
  std::cout << "output " << cfg.output_dir << '\n';
  return 0;
}

Chain read_chain_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Usage("cannot open chain file '" + path + "'");
  return read_chain_jsonl(f);
}

int cmd_chain_verify(const std::string& path) {
  if (!fs::exists(path)) throw Usage("chain file not found: " + path);
  Chain chain = [&] {
    try {
      return read_chain_file(path);
    } catch (const Usage&) {
      throw;
    } catch (const std::exception& e) {
      throw Violation(path + ": " + e.what());
    }
  }();
  const auto problems = audit_chain(chain);
  if (!problems.empty()) {
    for (const auto& p : problems) std::cerr << "violation: " << p << '\n';
    throw Violation(path + ": audit failed");
  }
  std::cout << "ok " << path << ": height " << chain.height() << ", " << chain.record_count() << " records, "
            << to_string(chain.params().policy) << " admission\n";
  return 0;
}

int cmd_chain_dump(const std::string& path) {
  Chain chain = [&] {
    try {
      return read_chain_file(path);
    } catch (const Usage&) {
      throw;
    } catch (const std::exception& e) {
      throw Violation(path + ": " + e.what());
    }
  }();
  std::cout << "height,timestamp,transactions,producer,digest\n";
  for (const auto& b : chain.blocks())
    std::cout << b->height << ',' << b->timestamp << ',' << b->transactions.size() << ','
              << b->producer.hex().substr(0, 16) << ',' << b->digest().hex() << '\n';
  return 0;
}

std::vector<LogEntry> read_event_log(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Usage("cannot open event log '" + path + "'");
  static const std::map<std::string, LogKind> kinds = {{"deliver", LogKind::Deliver},
                                                       {"drop", LogKind::Drop},
                                                       {"discard", LogKind::Discard},
                                                       {"timer", LogKind::Timer},
                                                       {"fault", LogKind::Fault}};
  std::vector<LogEntry> out;
  std::set<std::uint64_t> seqs;
  std::string line;
  std::size_t lineno = 0;
  auto node = [](std::int64_t v) { return v < 0 ? kSystemNode : static_cast<NodeId>(v); };
  while (std::getline(f, line)) {
    ++lineno;
    const std::string where = path + ":" + std::to_string(lineno) + ": ";
    LogEntry e;
    try {
      const auto j = nlohmann::json::parse(line);
      e.time = SimTime::micros(j.at("t").get<std::int64_t>());
      e.seq = j.at("seq").get<std::uint64_t>();
      auto k = kinds.find(j.at("kind").get<std::string>());
      if (k == kinds.end()) throw Violation(where + "unknown entry kind");
      e.kind = k->second;
      e.from = node(j.at("from").get<std::int64_t>());
      e.to = node(j.at("to").get<std::int64_t>());
      e.what = j.at("what").get<std::string>();
    } catch (const nlohmann::json::exception& ex) {
      throw Violation(where + ex.what());
    }
    if (!out.empty() && e.time < out.back().time) throw Violation(where + "time goes backwards");
    if (!seqs.insert(e.seq).second) throw Violation(where + "duplicate sequence number");
    out.push_back(std::move(e));
  }
  return out;
}

std::string head_word(const std::string& s) { return s.substr(0, s.find(' ')); }

int cmd_netsim_replay(const std::string& path, bool verbose) {
  const auto log = read_event_log(path);
  std::map<std::string, std::size_t> by_kind, delivered, dropped;
  for (const auto& e : log) {
    by_kind[to_string(e.kind)]++;
    if (e.kind == LogKind::Deliver) delivered[head_word(e.what)]++;
    if (e.kind == LogKind::Drop) dropped[head_word(e.what)]++;
    if (verbose) {
      std::cout << format_seconds(e.time) << ' ' << to_string(e.kind) << ' ';
      std::cout << (e.from == kSystemNode ? std::string("-") : std::to_string(e.from)) << "->"
                << (e.to == kSystemNode ? std::string("-") : std::to_string(e.to)) << ' ' << e.what << '\n';
    }
  }
  std::cout << "entries " << log.size() << ", span " << (log.empty() ? "0" : format_seconds(log.front().time))
            << ".." << (log.empty() ? "0" : format_seconds(log.back().time)) << " s\n";
  for (const auto& [k, n] : by_kind) std::cout << k << ' ' << n << '\n';
  for (const auto& [k, n] : delivered) std::cout << "deliver " << k << ' ' << n << '\n';
  for (const auto& [k, n] : dropped) std::cout << "drop " << k << ' ' << n << '\n';
  return 0;
}

// Per-round delivered consensus messages, bucketed by whole seconds.
int cmd_consensus_stats(const std::string& path) {
  const auto log = read_event_log(path);
  static const std::vector<std::string> cols = {"proposal", "reply", "announce", "sync_request", "sync_response"};
  std::map<std::int64_t, std::map<std::string, std::uint64_t>> rounds;
  for (const auto& e : log) {
    if (e.kind == LogKind::Timer && head_word(e.what) == "round_start") rounds[e.time.us / 1'000'000];
    if (e.kind != LogKind::Deliver) continue;
    const auto k = head_word(e.what);
    if (std::find(cols.begin(), cols.end(), k) != cols.end()) rounds[e.time.us / 1'000'000][k]++;
  }
  std::cout << "round";
  for (const auto& c : cols) std::cout << ',' << c;
  std::cout << ",signaling\n";
  for (auto& [r, m] : rounds) {
    std::uint64_t total = 0;
    std::cout << r;
    for (const auto& c : cols) {
      std::cout << ',' << m[c];
      total += m[c];
    }
    std::cout << ',' << total << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Blockchain-backed vehicle risk assessment simulator"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("config", common.config, "INI configuration file");
    if (config_required) opt->required();
    sub->add_option("--seed", common.seed, "override the configured seed");
    sub->add_option("--out", common.out, "output directory (overrides run.output_dir)");
  };

  auto* simulate = app.add_subcommand("simulate", "run the network and write the chain, event log and round stats");
  add_common(simulate, true);

  std::string arch;
  auto* train_cmd = app.add_subcommand("train", "simulate, then train a model on the stored records");
  add_common(train_cmd, true);
  train_cmd->add_option("--arch", arch, "lstm or dnn (overrides model.architecture)");

  std::string model_path;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "score a trained model on the honest held-out vehicles");
  add_common(evaluate_cmd, true);
  evaluate_cmd->add_option("model", model_path, "model file written by train")->required();

  auto* fig5 = app.add_subcommand("fig5", "training loss per iteration for the four schemes");
  add_common(fig5, false);
  auto* fig6 = app.add_subcommand("fig6", "test accuracy versus the number of malicious vehicles");
  add_common(fig6, false);

  std::string path;
  auto* chain = app.add_subcommand("chain", "inspect a chain dump");
  chain->require_subcommand(1);
  auto* dump = chain->add_subcommand("dump", "list blocks");
  dump->add_option("file", path)->required();
  auto* verify = chain->add_subcommand("verify", "re-check every block; exit 2 on any violation");
  verify->add_option("file", path)->required();

  bool verbose = false;
  auto* netsim = app.add_subcommand("netsim", "event log tools");
  netsim->require_subcommand(1);
  auto* replay = netsim->add_subcommand("replay", "validate an event log and summarize it");
  replay->add_option("log", path)->required();
  replay->add_flag("--verbose", verbose, "print every entry");

  auto* consensus = app.add_subcommand("consensus", "consensus tools");
  consensus->require_subcommand(1);
  auto* stats = consensus->add_subcommand("stats", "per-round signaling counts from an event log");
  stats->add_option("log", path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*simulate) return cmd_simulate(common);
    if (*train_cmd) return cmd_train(common, arch);
    if (*evaluate_cmd) return cmd_evaluate(common, model_path);
    if (*fig5) return cmd_fig5(common);
    if (*fig6) return cmd_fig6(common);
    if (*verify) return cmd_chain_verify(path);
    if (*dump) return cmd_chain_dump(path);
    if (*replay) return cmd_netsim_replay(path, verbose);
    if (*stats) return cmd_consensus_stats(path);
  } catch (const ConfigInvalid& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const Usage& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const DecodeError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 1;
  } catch (const Violation& e) {
    std::cerr << "invariant violation: " << e.what() << '\n';
    return 2;
  } catch (const DivergenceDetected& e) {
    std::cerr << "invariant violation: " << e.what() << '\n';
    return 2;
  } catch (const IntegrityViolation& e) {
    std::cerr << "invariant violation: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
