// Acceptance run: one PASS/FAIL line per criterion. The experiment criteria
// drive the real `best` binary with configs/default.ini; the rest exercise the
// library directly. Exit status is nonzero if any criterion fails.
//
// usage: acceptance [work_dir]
// The per-criterion report is also written to BEST_REPORT_PATH.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "best/harness.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace best;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::map<int, Outcome> results;

void report(int n, bool pass, const std::string& detail) {
  results[n] = {pass, detail};
  std::cout << "criterion " << n << ": " << (pass ? "PASS" : "FAIL") << " - " << detail << std::endl;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

struct CliRun {
  int code = -1;
  double seconds = 0;
  std::string output;
};

CliRun cli(const std::string& args, const fs::path& work) {
  const fs::path log = work / "cli.log";
  const std::string cmd = std::string(BEST_CLI_PATH) + " " + args + " >" + log.string() + " 2>&1";
  const auto t0 = Clock::now();
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = slurp(log);
  return r;
}

using Table = std::vector<std::map<std::string, std::string>>;

Table read_csv(const fs::path& p) {
  std::istringstream is(slurp(p));
  std::string line;
  std::vector<std::string> head;
  Table rows;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string x; std::getline(ss, x, ',');) out.push_back(x);
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  if (!std::getline(is, line)) return rows;
  head = split(line);
  while (std::getline(is, line)) {
    const auto cells = split(line);
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < head.size() && i < cells.size(); ++i) row[head[i]] = cells[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

double num(const std::map<std::string, std::string>& row, const std::string& key) {
  auto it = row.find(key);
  if (it == row.end() || it->second.empty()) return std::nan("");
  return std::stod(it->second);
}

std::string fmt(double v, const char* f = "%.4f") { return best::fmt(v, f); }

std::string config_path() { return std::string(BEST_SOURCE_DIR) + "/configs/default.ini"; }

// ---------------------------------------------------------------------------

void criterion_fig5(const fs::path& work) {
  const auto run = cli("fig5 " + config_path() + " --out " + (work / "fig5_a").string(), work);
  if (run.code != 0) return report(1, false, "best fig5 exited " + std::to_string(run.code) + ": " + run.output);
  const Table t = read_csv(work / "fig5_a" / "fig5.csv");
  if (t.empty()) return report(1, false, "fig5.csv is empty");
  const auto& last = t.back();
  const double lb = num(last, "lstm_blockchain"), db = num(last, "dnn_blockchain"), lc = num(last, "lstm_central"),
               dc = num(last, "dnn_central");
  const bool ok = lb < db && lb < lc && lb <= 0.35 && run.seconds <= 600;
  report(1, ok,
         "iteration " + last.at("iteration") + " mean loss lstm_blockchain " + fmt(lb) + ", dnn_blockchain " + fmt(db) +
             ", lstm_central " + fmt(lc) + ", dnn_central " + fmt(dc) + "; runtime " + fmt(run.seconds, "%.0f") +
             " s (limit 600)");
}

void criterion_repeat(const fs::path& work) {
  const auto run = cli("fig5 " + config_path() + " --out " + (work / "fig5_b").string(), work);
  if (run.code != 0) return report(10, false, "second best fig5 exited " + std::to_string(run.code));
  std::vector<std::string> differ;
  std::size_t compared = 0;
  for (const auto& e : fs::directory_iterator(work / "fig5_a")) {
    const auto name = e.path().filename().string();
    if (e.path().extension() != ".csv" || name == "timing.csv") continue;
    ++compared;
    if (slurp(e.path()) != slurp(work / "fig5_b" / name)) differ.push_back(name);
  }
  const bool ok = differ.empty() && compared >= 4;
  std::string detail = std::to_string(compared) + " CSV files compared (timing.csv excluded, wall clock only)";
  for (const auto& d : differ) detail += "; differs: " + d;
  report(10, ok, detail);
}

void criterion_fig6(const fs::path& work) {
  const auto run = cli("fig6 " + config_path() + " --out " + (work / "fig6").string(), work);
  if (run.code != 0) return report(2, false, "best fig6 exited " + std::to_string(run.code) + ": " + run.output);
  const Table t = read_csv(work / "fig6" / "fig6.csv");
  if (t.size() < 2) return report(2, false, "fig6.csv has fewer than two rows");
  double lo = 1, hi = 0;
  std::string series;
  for (const auto& row : t) {
    const double a = num(row, "lstm_blockchain");
    lo = std::min(lo, a);
    hi = std::max(hi, a);
    series += (series.empty() ? "" : " ") + fmt(100 * a, "%.1f");
  }
  auto drop = [&](const char* s) { return num(t.front(), s) - num(t.back(), s); };
  const double dl = drop("lstm_central"), dd = drop("dnn_central");
  const bool ok = hi - lo <= 0.05 && lo >= 0.85 && dl >= 0.10 && dd >= 0.10 && run.seconds <= 900;
  report(2, ok,
         "lstm_blockchain accuracy % [" + series + "], band " + fmt(100 * (hi - lo), "%.1f") +
             " points; central drop from " + t.front().at("malicious_count") + " to " + t.back().at("malicious_count") +
             ": lstm " + fmt(100 * dl, "%.1f") + ", dnn " + fmt(100 * dd, "%.1f") + " points; runtime " +
             fmt(run.seconds, "%.0f") + " s (limit 900)");
}

void criterion_liveness(const fs::path& work) {
  const fs::path dir = work / "zero_latency";
  fs::create_directories(dir);
  const std::int64_t duration = 20;
  {
    std::ofstream f(dir / "zero.ini");
    f << "[run]\nduration = " << duration << "\noutput_dir = " << dir.string()
      << "\n[network]\nvehicle_latency_ms = 0\nrsu_latency_ms = 0\n";
  }
  const auto sim = cli("simulate " + (dir / "zero.ini").string(), work);
  if (sim.code != 0) return report(3, false, "best simulate exited " + std::to_string(sim.code));
  const ExperimentConfig cfg = load_config((dir / "zero.ini").string());
  const std::uint64_t m = cfg.sim.consensus.committee_size, n = cfg.sim.world.rsu_count;
  const std::uint64_t want = (m - 1) + (m - 1) + (n - 1);

  std::ifstream cf(dir / "chain.jsonl");
  const Chain chain = read_chain_jsonl(cf);
  bool one_per_second = chain.height() == static_cast<std::uint64_t>(duration);
  for (std::size_t h = 1; h < chain.blocks().size(); ++h)
    one_per_second = one_per_second && chain.blocks()[h]->timestamp == static_cast<std::int64_t>(h);

  const auto stats = cli("consensus stats " + (dir / "events.jsonl").string(), work);
  std::ofstream(dir / "stats.csv") << stats.output;
  const Table t = read_csv(dir / "stats.csv");
  std::size_t matching = 0;
  for (const auto& row : t)
    matching += num(row, "proposal") == double(m - 1) && num(row, "reply") == double(m - 1) &&
                num(row, "announce") == double(n - 1) && num(row, "signaling") == double(want);
  const auto rounds = read_csv(dir / "rounds.csv");
  std::size_t sent_matching = 0;
  for (const auto& row : rounds) sent_matching += num(row, "signaling_msgs") == double(want);
  const bool ok = stats.code == 0 && one_per_second && t.size() == std::size_t(duration) &&
                  matching == t.size() && sent_matching == rounds.size() && rounds.size() == std::size_t(duration);
  report(3, ok,
         std::to_string(chain.height()) + " blocks in " + std::to_string(duration) + " s, block timestamps " +
             (one_per_second ? "1..N" : "irregular") + "; logged signaling " + std::to_string(want) + " = (" +
             std::to_string(m - 1) + ")+(" + std::to_string(m - 1) + ")+(" + std::to_string(n - 1) + ") in " +
             std::to_string(matching) + "/" + std::to_string(t.size()) + " rounds, sent count matches in " +
             std::to_string(sent_matching) + "/" + std::to_string(rounds.size()));
}

void criterion_safety() {
  const auto t0 = Clock::now();
  const std::size_t modes = std::size(kAllModes);
  SimulationConfig base;
  base.world.seed = 5;
  base.world.cav_count = 6;
  base.world.rsu_count = 5;
  base.consensus.committee_size = 4;
  base.duration_s = 3;
  base.keep_event_log = false;
  const Committee c = elect_committee(make_stake_pool(base), 4);
  std::size_t scenarios = 0, disagreements = 0, finalized = 0;
  for (RsuId traitor : c.crns) {
    for (std::size_t code = 0; code < modes * modes * modes; ++code) {
      SimulationConfig cfg = base;
      std::string script;
      std::size_t x = code;
      for (int r = 1; r <= 3; ++r) {
        script += std::to_string(r - 1) + ".5 " + std::to_string(traitor) + " byzantine " +
                  to_string(kAllModes[x % modes]) + ";";
        x /= modes;
      }
      cfg.faults = FaultScript::parse(script);
      const auto res = run_simulation(cfg);
      disagreements += res.safety_violations.size();
      for (const auto& r : res.rounds) finalized += r.outcome == RoundOutcome::Finalized;
      ++scenarios;
    }
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  report(4, disagreements == 0 && scenarios == 4 * modes * modes * modes && secs <= 60,
         std::to_string(scenarios) + " scenarios (4 traitor seats x " + std::to_string(modes) +
             "^3 mode scripts), " + std::to_string(disagreements) + " disagreements, " + std::to_string(finalized) +
             " rounds finalized; runtime " + fmt(secs, "%.1f") + " s (limit 60)");
}

void criterion_finality() {
  std::size_t cases = 0, mismatches = 0;
  for (std::size_t m = 4; m <= 10; ++m) {
    std::vector<KeyPair> keys;
    std::vector<PublicKey> dir;
    Committee c;
    for (RsuId i = 0; i < m; ++i) {
      keys.push_back(rsu_identity(77, i));
      dir.push_back(keys.back().identity.public_key);
      c.crns.push_back(i);
    }
    const CommitteeKeys ck = committee_keys(c, dir);
    auto block = std::make_shared<const Block>(build_block({}, make_genesis(), keys[0], 1, kDefaultBlockLimit).block);
    for (std::size_t approvals = 0; approvals <= m; ++approvals) {
      const bool brute = 3 * approvals > 2 * m;
      ++cases;
      if (reaches_finality(approvals, m) != brute) ++mismatches;
      if (approvals == 0) continue;
      // Signed path: the producer's implicit approval plus approvals-1 replies.
      RoundState st;
      st.proposed = block;
      std::vector<ValidationReply> replies;
      for (std::size_t v = 1; v < m; ++v)
        replies.push_back(ValidationReply::make(block->digest(), v < approvals, keys[v]));
      ++cases;
      if ((collect_and_finalize(st, replies, ck) == RoundOutcome::Finalized) != brute) ++mismatches;
    }
  }
  report(5, mismatches == 0,
         std::to_string(cases) + " (M, approvals) cases for M=4..10, threshold and signed-reply paths, " +
             std::to_string(mismatches) + " mismatches against approvals > 2M/3");
}

void criterion_admission() {
  const auto r = oracle::mixed_admission_trial(10'000);
  const bool ok = r.total >= 10'000 && r.forged > 0 && r.forged_rejected == r.forged && r.honest_rejected == 0 &&
                  r.mismatches == 0 && r.chain_valid;
  report(6, ok,
         std::to_string(r.total) + " records: forged rejected " + std::to_string(r.forged_rejected) + "/" +
             std::to_string(r.forged) + ", honest rejected " + std::to_string(r.honest_rejected) + "/" +
             std::to_string(r.total - r.forged) + ", verdict mismatches vs reference " + std::to_string(r.mismatches));
}

double gradient_worst(ModelParams p, const std::vector<LabeledSequence>& data) {
  const auto [loss, grads] = loss_and_gradients(p, data);
  if (!std::isfinite(loss)) return INFINITY;
  constexpr double eps = 1e-5;
  double worst = 0;
  for (std::size_t k = 0; k < p.tensors.size(); ++k) {
    for (Eigen::Index i = 0; i < p.tensors[k].size(); ++i) {
      const double orig = p.tensors[k](i);
      p.tensors[k](i) = orig + eps;
      const double up = loss_and_gradients(p, data).first;
      p.tensors[k](i) = orig - eps;
      const double down = loss_and_gradients(p, data).first;
      p.tensors[k](i) = orig;
      const double numeric = (up - down) / (2 * eps);
      const double scale = std::max({std::abs(numeric), std::abs(grads[k](i)), 1e-6});
      worst = std::max(worst, std::abs(numeric - grads[k](i)) / scale);
    }
  }
  return worst;
}

void criterion_gradients() {
  Rng rng(4);
  std::vector<LabeledSequence> data;
  for (std::size_t n = 1; n <= 6; ++n) {
    LabeledSequence s;
    s.length = 1 + rng.below(kWindow);
    for (std::size_t t = kWindow - s.length; t < kWindow; ++t)
      for (std::size_t k = 0; k < kFeatureCount; ++k) s.features(t, k) = rng.uniform();
    s.label = static_cast<RiskLevel>(rng.below(kClasses));
    data.push_back(s);
  }
  const ExperimentConfig def;
  const double lstm = gradient_worst(init_model(Architecture::Lstm2, def.model.hidden, 0.0, 11), data);
  const double dnn = gradient_worst(init_model(Architecture::Dnn4, def.model.hidden, 0.0, 12), data);
  report(7, lstm < 1e-4 && dnn < 1e-4,
         "every parameter, central differences eps 1e-5: worst relative error lstm " + fmt(lstm, "%.2e") + ", dnn " +
             fmt(dnn, "%.2e") + " (limit 1e-4)");
}

void criterion_normalization() {
  Rng rng(6);
  double worst_sum = 0, min_vri = 1, max_vri = 0;
  for (int trial = 0; trial < 100'000; ++trial) {
    const double scale = trial % 10 == 0 ? 800.0 : 20.0;
    Eigen::MatrixXd z(kClasses, 1);
    for (Eigen::Index k = 0; k < z.rows(); ++k) z(k) = rng.uniform(-scale, scale);
    const Eigen::MatrixXd p = detail::softmax(z);
    worst_sum = std::max(worst_sum, std::abs(p.sum() - 1.0));
    const double v = vri_from_probabilities(p.col(0));
    min_vri = std::min(min_vri, v);
    max_vri = std::max(max_vri, v);
  }
  const Thresholds th;
  bool partition = true;
  const std::vector<std::pair<double, Countermeasure>> probes = {
      {1e-6, Countermeasure::None},
      {std::nextafter(th.alpha, 0.0), Countermeasure::None},
      {th.alpha, Countermeasure::None},
      {std::nextafter(th.alpha, 1.0), Countermeasure::Warning},
      {std::nextafter(th.beta, 0.0), Countermeasure::Warning},
      {th.beta, Countermeasure::Warning},
      {std::nextafter(th.beta, 1.0), Countermeasure::Suspension},
      {1.0, Countermeasure::Suspension}};
  for (const auto& [v, want] : probes) partition = partition && countermeasure_for(v, th) == want;
  const bool vri_ok = min_vri > 0 && max_vri <= 1;
  report(8, worst_sum <= 1e-9 && vri_ok && partition,
         "100000 softmax draws: worst |sum-1| " + fmt(worst_sum, "%.1e") + "; VRI range [" + fmt(min_vri, "%.6f") +
             ", " + fmt(max_vri, "%.6f") + "]; countermeasure boundaries at alpha " + fmt(th.alpha, "%.2f") +
             " and beta " + fmt(th.beta, "%.2f") + (partition ? " exact" : " WRONG"));
}

void criterion_chain_verify(const fs::path& work) {
  std::vector<fs::path> dumps;
  for (const auto* sub : {"fig5_a", "fig5_b", "fig6"}) {
    const fs::path chains = work / sub / "chains";
    if (!fs::exists(chains)) continue;
    for (const auto& e : fs::directory_iterator(chains)) dumps.push_back(e.path());
  }
  if (fs::exists(work / "zero_latency" / "chain.jsonl")) dumps.push_back(work / "zero_latency" / "chain.jsonl");
  std::sort(dumps.begin(), dumps.end());
  std::size_t ok = 0;
  std::string failed;
  for (const auto& d : dumps) {
    if (cli("chain verify " + d.string(), work).code == 0) ++ok;
    else failed += " " + d.filename().string();
  }
  // One-byte corruptions at random offsets of the first dump from each run.
  Rng rng(9);
  std::size_t corruptions = 0, caught = 0;
  std::set<fs::path> seen;
  for (const auto& d : dumps) {
    if (!seen.insert(d.parent_path()).second) continue;
    const std::string bytes = slurp(d);
    for (int i = 0; i < 3; ++i) {
      std::string bad = bytes;
      const std::size_t at = rng.below(bad.size());
      bad[at] = static_cast<char>(bad[at] ^ (1 + rng.below(255)));
      const fs::path p = work / "corrupt.jsonl";
      std::ofstream(p, std::ios::binary) << bad;
      ++corruptions;
      caught += cli("chain verify " + p.string(), work).code == 2;
    }
  }
  const bool pass = !dumps.empty() && ok == dumps.size() && corruptions > 0 && caught == corruptions;
  report(9, pass,
         std::to_string(ok) + "/" + std::to_string(dumps.size()) + " experiment dumps verify" +
             (failed.empty() ? "" : " (failed:" + failed + ")") + "; " + std::to_string(caught) + "/" +
             std::to_string(corruptions) + " one-byte corruptions exit 2");
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "best_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);
  const auto t0 = Clock::now();

  auto guard = [](int n, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      report(n, false, std::string("exception: ") + e.what());
    }
  };
  guard(3, [&] { criterion_liveness(work); });
  guard(4, [] { criterion_safety(); });
  guard(5, [] { criterion_finality(); });
  guard(6, [] { criterion_admission(); });
  guard(7, [] { criterion_gradients(); });
  guard(8, [] { criterion_normalization(); });
  guard(1, [&] { criterion_fig5(work); });
  guard(10, [&] { criterion_repeat(work); });
  guard(2, [&] { criterion_fig6(work); });
  guard(9, [&] { criterion_chain_verify(work); });

  std::cout << "\nsummary (work dir " << work.string() << ", "
            << best::fmt(std::chrono::duration<double>(Clock::now() - t0).count(), "%.0f") << " s)\n";
  std::size_t passed = 0;
  std::ofstream rep(BEST_REPORT_PATH);
  for (const auto& [n, o] : results) {
    std::cout << "criterion " << n << ": " << (o.pass ? "PASS" : "FAIL") << '\n';
    rep << "criterion " << n << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << '\n';
    passed += o.pass;
  }
  std::cout << passed << "/" << results.size() << " criteria pass\n";
  rep << passed << "/" << results.size() << " criteria pass\n";
  return passed == results.size() ? 0 : 1;
}
