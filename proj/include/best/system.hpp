#pragma once

// Scenario driver: steps the world once per second, routes vehicle records
// to RSUs over netsim, and runs either the BFT-DPoS network or the
// centralized store. Produces the reference chain, a per-round log, the
// netsim event log and admission counters.

#include <array>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "best/consensus.hpp"
#include "best/ledger.hpp"
#include "best/netsim.hpp"
#include "best/telemetry.hpp"

namespace best {

enum class StoreKind : std::uint8_t { Blockchain, Central };

inline const char* to_string(StoreKind k) { return k == StoreKind::Blockchain ? "blockchain" : "central"; }

struct NetworkConfig {
  LinkModel vehicle_link{SimTime::millis(10), {}, 0.0};
  LinkModel rsu_link{SimTime::millis(5), {}, 0.0};
  SimTime collect_delay = SimTime::millis(20);
  SimTime propose_delay = SimTime::millis(50);
  SimTime round_timer = SimTime::seconds(1);

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

struct ConsensusConfig {
  std::size_t committee_size = 7;
  RewardParams rewards;
  // Whole-token deposits per RSU. Empty: drawn from the seed in [100, 1000].
  std::vector<std::uint64_t> deposits;

  friend bool operator==(const ConsensusConfig&, const ConsensusConfig&) = default;
};

struct SimulationConfig {
  WorldConfig world;
  ConsensusConfig consensus;
  NetworkConfig network;
  std::size_t block_limit = kDefaultBlockLimit;
  std::int64_t duration_s = 10;
  FaultScript faults;
  StoreKind store = StoreKind::Blockchain;
  bool keep_event_log = true;
};

inline constexpr NodeId kVehicleNodeBase = 1'000'000;

struct RoundRecord {
  std::uint64_t round = 0;
  std::uint64_t epoch = 0;
  RsuId producer = 0;
  RoundOutcome outcome = RoundOutcome::Pending;
  std::size_t approvals = 0;
  std::size_t rejections = 0;
  std::optional<std::int64_t> latency_us;
  std::array<std::uint64_t, kMessageKinds> messages{};
  std::size_t transactions = 0;
  std::string offences;

  std::uint64_t signaling() const {
    return messages[static_cast<std::size_t>(MessageKind::Proposal)] +
           messages[static_cast<std::size_t>(MessageKind::Reply)] +
           messages[static_cast<std::size_t>(MessageKind::Announce)] +
           messages[static_cast<std::size_t>(MessageKind::SyncRequest)] +
           messages[static_cast<std::size_t>(MessageKind::SyncResponse)];
  }
};

inline void write_rounds_csv(std::ostream& os, const std::vector<RoundRecord>& rows) {
  os << "round,epoch,producer,outcome,approvals,rejections,latency_ms,record_msgs,batch_msgs,proposal_msgs,"
        "reply_msgs,announce_msgs,sync_msgs,signaling_msgs,transactions,offences\n";
  for (const auto& r : rows) {
    char lat[32] = "";
    if (r.latency_us) std::snprintf(lat, sizeof lat, "%.3f", static_cast<double>(*r.latency_us) / 1000.0);
    const auto& m = r.messages;
    os << r.round << ',' << r.epoch << ',' << r.producer << ',' << to_string(r.outcome) << ',' << r.approvals << ','
       << r.rejections << ',' << lat << ',' << m[0] << ',' << m[1] << ',' << m[2] << ',' << m[3] << ',' << m[4] << ','
       << (m[5] + m[6]) << ',' << r.signaling() << ',' << r.transactions << ',' << r.offences << '\n';
  }
}

struct SimulationResult {
  Chain store;
  std::vector<RoundRecord> rounds;
  std::vector<LogEntry> event_log;
  std::map<AdmissionVerdict, std::uint64_t> rejected;
  std::uint64_t emitted_records = 0;
  std::uint64_t forged_records = 0;
  std::uint64_t blocks_finalized = 0;
  TokenLedger tokens;
  Committee committee;
  StakePool pool;
  std::vector<std::string> safety_violations;
  std::set<PublicKey> malicious_keys;

  std::uint64_t rejected_total() const {
    std::uint64_t n = 0;
    for (const auto& [v, c] : rejected) n += c;
    return n;
  }
};

inline KeyPair rsu_identity(std::uint64_t seed, RsuId id) {
  return generate_identity(derive_seed(seed, 0x20000 + id), IdentityKind::Rsu);
}

inline StakePool make_stake_pool(const SimulationConfig& cfg) {
  StakePool pool;
  const auto n = cfg.world.rsu_count;
  if (!cfg.consensus.deposits.empty()) {
    if (cfg.consensus.deposits.size() != n) throw ConfigInvalid("consensus.deposits: need one entry per RSU");
    for (RsuId i = 0; i < n; ++i) pool.deposits[i] = cfg.consensus.deposits[i];
    return pool;
  }
  Rng rng(derive_seed(cfg.world.seed, 0x3001));
  for (RsuId i = 0; i < n; ++i) pool.deposits[i] = 100 + rng.below(901);
  return pool;
}

// Called at the start of each round, before records are emitted, with the
// reference store. Used to close the VRI feedback loop.
using FeedbackHook = std::function<void(const Chain& store, World& world, std::int64_t t)>;

class Simulation {
 public:
  explicit Simulation(SimulationConfig cfg, FeedbackHook feedback = {})
      : cfg_(std::move(cfg)), feedback_(std::move(feedback)), world_(cfg_.world), sim_(cfg_.world.seed) {
    if (cfg_.duration_s < 1) throw ConfigInvalid("run.duration: must be at least 1 second");
    const std::uint64_t seed = cfg_.world.seed;
    const auto n = cfg_.world.rsu_count;
    sim_.set_logging(cfg_.keep_event_log);
    for (const auto& v : world_.vehicles())
      if (v.malicious()) result_.malicious_keys.insert(v.key());

    LedgerParams lp;
    lp.limits = cfg_.world.limits;
    lp.block_limit = cfg_.block_limit;
    const auto registry = world_.registry();
    if (cfg_.store == StoreKind::Blockchain) {
      auto dir = std::make_shared<std::vector<PublicKey>>();
      std::vector<KeyPair> keys;
      for (RsuId i = 0; i < n; ++i) {
        keys.push_back(rsu_identity(seed, i));
        dir->push_back(keys.back().identity.public_key);
      }
      directory_ = dir;
      pool_ = make_stake_pool(cfg_);
      committee_ = elect_committee(pool_, cfg_.consensus.committee_size);
      committee_.start_round = 1;
      nodes_.reserve(n);
      for (RsuId i = 0; i < n; ++i) nodes_.emplace_back(i, n, keys[i], directory_, lp, registry, committee_);
    } else {
      lp.policy = AdmissionPolicy::SignatureOnly;
      central_.emplace(lp, std::vector<PublicKey>{});
      central_keys_ = generate_identity(derive_seed(seed, 0x30000), IdentityKind::Central);
      inboxes_.resize(n);
    }
    for (const auto& a : cfg_.faults.actions)
      if (a.node >= n) throw ConfigInvalid("faults: node " + std::to_string(a.node) + " is not an RSU");
    sim_.load_faults(cfg_.faults);
    for (std::int64_t r = 1; r <= cfg_.duration_s; ++r) {
      sim_.schedule_timer(SimTime::seconds(r), kSystemNode, tag(kRoundStart, r), "round_start " + std::to_string(r));
      sim_.schedule_timer(SimTime::seconds(r) + cfg_.network.round_timer, kSystemNode, tag(kDeadline, r),
                          "deadline " + std::to_string(r));
    }
  }

  const SimulationConfig& config() const { return cfg_; }
  const World& world() const { return world_; }
  const std::vector<RsuNode>& nodes() const { return nodes_; }
  const Simulator<Message>& simulator() const { return sim_; }

  SimulationResult run() {
    const SimTime end = SimTime::seconds(cfg_.duration_s) + cfg_.network.round_timer;
    sim_.run_until(end, [this](const Simulator<Message>::Event& ev) { on_event(ev); });
    finish();
    return std::move(result_);
  }

 private:
  enum TimerKind : std::uint64_t { kRoundStart = 1, kCollect = 2, kPropose = 3, kDeadline = 4, kCentralBuild = 5 };
  static std::uint64_t tag(TimerKind k, std::int64_t round) {
    return (static_cast<std::uint64_t>(k) << 56) | static_cast<std::uint64_t>(round);
  }

  bool blockchain() const { return cfg_.store == StoreKind::Blockchain; }

  void on_event(const Simulator<Message>::Event& ev) {
    using Sim = Simulator<Message>;
    if (auto* t = std::get_if<Sim::Timer>(&ev.payload)) {
      const auto kind = static_cast<TimerKind>(t->tag >> 56);
      const auto round = t->tag & ((1ULL << 56) - 1);
      switch (kind) {
        case kRoundStart: round_start(round); break;
        case kCollect: collect(t->node, round); break;
        case kPropose: dispatch(t->node, nodes_[t->node].propose_block(round)); break;
        case kDeadline: deadline(round); break;
        case kCentralBuild: central_build(round); break;
      }
      return;
    }
    if (auto* f = std::get_if<FaultAction>(&ev.payload)) {
      if (f->kind == FaultKind::Byzantine && blockchain()) {
        nodes_[f->node].set_mode(parse_byzantine_mode(f->mode));
        if (f->mode != "honest") ever_byzantine_.insert(f->node);
      }
      return;
    }
    const auto& d = std::get<Sim::Delivery>(ev.payload);
    if (d.to == central_id()) {
      if (auto* b = std::get_if<BatchMsg>(&d.message))
        for (const auto& r : *b->records) central_pending_.push_back({Transaction::from(r), b->round});
      return;
    }
    if (!blockchain()) {
      if (auto* r = std::get_if<RecordMsg>(&d.message)) inboxes_[d.to].push_back(r->record);
      return;
    }
    RsuNode& node = nodes_[d.to];
    const std::uint64_t before = node.chain().height();
    dispatch(d.to, node.handle(d.from, d.message));
    if (node.chain().height() != before) note_append(node);
  }

  NodeId central_id() const { return cfg_.world.rsu_count; }

  std::uint64_t current_round() const { return static_cast<std::uint64_t>(sim_.now().us / 1'000'000); }

  RoundRecord& row(std::uint64_t round) {
    auto it = rows_.find(round);
    if (it == rows_.end()) {
      it = rows_.emplace(round, RoundRecord{}).first;
      it->second.round = round;
    }
    return it->second;
  }

  void send(NodeId from, NodeId to, Message msg, const LinkModel& link) {
    row(current_round()).messages[static_cast<std::size_t>(kind_of(msg))] += 1;
    sim_.send(from, to, std::move(msg), link);
  }

  void dispatch(NodeId from, Outbox out) {
    for (auto& o : out) {
      if (auto* p = std::get_if<ProposalMsg>(&o.message)) {
        auto& seen = proposals_[p->round];
        const Digest d = p->block->digest();
        if (std::none_of(seen.begin(), seen.end(), [&](const ObservedProposal& x) {
              return x.proposer == from && x.block->digest() == d;
            }))
          seen.push_back({from, p->block});
      } else if (auto* r = std::get_if<ReplyMsg>(&o.message)) {
        replies_[r->round].push_back(r->reply);
      }
      send(from, o.to, std::move(o.message), cfg_.network.rsu_link);
    }
    if (blockchain() && nodes_[from].chain().height() > 0) note_append(nodes_[from]);
  }

  // Latency of a round: first moment an honest node holds one of its blocks.
  void note_append(const RsuNode& node) {
    if (node.mode() != ByzantineMode::Honest) return;
    const std::uint64_t r = current_round();
    RoundRecord& rr = row(r);
    if (rr.latency_us) return;
    for (const auto& p : proposals_[r]) {
      const auto h = p.block->height;
      if (h <= node.chain().height() && node.chain().at(h).digest() == p.block->digest()) {
        rr.latency_us = (sim_.now() - SimTime::seconds(static_cast<std::int64_t>(r))).us;
        return;
      }
    }
  }

  void round_start(std::uint64_t round) {
    const auto t = static_cast<std::int64_t>(round);
    if (feedback_) feedback_(reference_chain(), world_, t);
    world_.advance(1.0);
    auto emissions = emit_records(world_, t);
    for (auto& e : emissions) {
      ++result_.emitted_records;
      if (world_.vehicles()[e.vehicle_index].malicious()) ++result_.forged_records;
      send(kVehicleNodeBase + e.vehicle_index, e.rsu, RecordMsg{std::move(e.record)}, cfg_.network.vehicle_link);
    }
    const SimTime base = SimTime::seconds(t);
    for (RsuId i = 0; i < cfg_.world.rsu_count; ++i)
      sim_.schedule_timer(base + cfg_.network.collect_delay, i, tag(kCollect, t), "collect");
    if (blockchain()) {
      const RsuId p = committee_.producer_for(round);
      row(round).producer = p;
      row(round).epoch = committee_.epoch;
      sim_.schedule_timer(base + cfg_.network.propose_delay, p, tag(kPropose, t), "propose");
    } else {
      sim_.schedule_timer(base + cfg_.network.propose_delay, kSystemNode, tag(kCentralBuild, t), "central_build");
    }
  }

  void collect(NodeId rsu, std::uint64_t round) {
    if (blockchain()) {
      dispatch(rsu, nodes_[rsu].on_collect(round));
      return;
    }
    auto batch = std::make_shared<const std::vector<StatusRecord>>(std::exchange(inboxes_[rsu], {}));
    send(rsu, central_id(), BatchMsg{round, batch}, cfg_.network.rsu_link);
  }

  void central_build(std::uint64_t round) {
    Chain& store = *central_;
    PendingView view(store);
    std::vector<Transaction> admitted;
    for (auto& [tx, arrival] : central_pending_) {
      const auto v = admission_check(tx.record, view);
      if (v == AdmissionVerdict::Admit) {
        view.accept(tx.record);
        admitted.push_back(std::move(tx));
      } else {
        note_rejection({tx.digest, arrival, v, tx.record.vehicle});
      }
    }
    central_pending_.clear();
    auto built = build_block(std::move(admitted), store.tip(), central_keys_, static_cast<std::int64_t>(round),
                             store.params().block_limit);
    for (auto& tx : built.spilled) central_pending_.push_back({std::move(tx), round});
    RoundRecord& rr = row(round);
    rr.transactions = built.block.transactions.size();
    store.append(std::move(built.block));
    rr.outcome = RoundOutcome::Finalized;
    rr.approvals = 1;
    rr.latency_us = cfg_.network.propose_delay.us;
  }

  void note_rejection(const Rejection& r) {
    if (seen_rejections_.insert({r.tx, r.arrival_round}).second) result_.rejected[r.verdict] += 1;
  }

  void deadline(std::uint64_t round) {
    if (!blockchain()) return;
    for (auto& node : nodes_) {
      if (!sim_.crashed(node.id())) node.on_deadline(round);
      for (const auto& rej : node.take_rejections()) note_rejection(rej);
    }
    RoundRecord& rr = row(round);
    const auto& proposals = proposals_[round];
    const CommitteeKeys keys = committee_keys(committee_, *directory_);
    // Outcome: some honest node holds a block proposed this round.
    for (const auto& p : proposals) {
      RoundState st;
      st.proposed = p.block;
      collect_and_finalize(st, replies_[round], keys);
      const Tally t = tally(st, keys);
      rr.approvals = std::max(rr.approvals, t.approvals);
      rr.rejections = std::max(rr.rejections, t.rejections);
      for (const auto& node : nodes_) {
        if (node.mode() != ByzantineMode::Honest || ever_byzantine_.count(node.id())) continue;
        const auto h = p.block->height;
        if (h <= node.chain().height() && node.chain().at(h).digest() == p.block->digest()) {
          rr.outcome = RoundOutcome::Finalized;
          rr.transactions = p.block->transactions.size();
        }
      }
    }
    if (rr.outcome != RoundOutcome::Finalized) {
      rr.outcome = RoundOutcome::Aborted;
      rr.latency_us.reset();
    }

    RoundEvents ev;
    ev.round = round;
    ev.producer = committee_.producer_for(round);
    ev.proposals = proposals;
    ev.replies = replies_[round];
    auto gov = detect_misbehavior_and_replace(ev, committee_, pool_, *directory_, tracker_, cfg_.consensus.rewards,
                                              round + 1);
    std::vector<RsuId> offenders;
    for (const auto& rep : gov.reports) {
      offenders.push_back(rep.rsu);
      if (!rr.offences.empty()) rr.offences += ';';
      rr.offences += std::to_string(rep.rsu) + ":" + to_string(rep.offence);
    }
    tokens_ = settle_round(rr.outcome, committee_, pool_, std::move(tokens_), round, cfg_.consensus.rewards, offenders);
    if (gov.new_epoch) {
      committee_ = gov.committee;
      for (auto& node : nodes_) node.install_committee(committee_);
    }
    proposals_.erase(round);
    replies_.erase(round);
  }

  const Chain& reference_chain() const {
    if (!blockchain()) return *central_;
    const RsuNode* best = nullptr;
    for (const auto& node : nodes_) {
      if (node.mode() != ByzantineMode::Honest || ever_byzantine_.count(node.id())) continue;
      if (!best || node.chain().height() > best->chain().height()) best = &node;
    }
    return best ? best->chain() : nodes_.front().chain();
  }

  void finish() {
    result_.store = reference_chain();
    for (std::int64_t r = 1; r <= cfg_.duration_s; ++r) result_.rounds.push_back(row(static_cast<std::uint64_t>(r)));
    for (const auto& rr : result_.rounds)
      if (rr.outcome == RoundOutcome::Finalized) ++result_.blocks_finalized;
    result_.event_log = sim_.log();
    result_.tokens = tokens_;
    result_.committee = committee_;
    result_.pool = pool_;
    if (!blockchain()) return;
    std::vector<const RsuNode*> honest;
    for (const auto& node : nodes_) {
      if (node.mode() != ByzantineMode::Honest || ever_byzantine_.count(node.id())) continue;
      honest.push_back(&node);
      for (const auto& c : node.conflicts())
        result_.safety_violations.push_back("RSU " + std::to_string(node.id()) + ": " + c);
    }
    for (std::size_t i = 0; i < honest.size(); ++i)
      for (std::size_t j = i + 1; j < honest.size(); ++j) {
        const Chain& a = honest[i]->chain();
        const Chain& b = honest[j]->chain();
        const auto h = std::min(a.height(), b.height());
        for (std::uint64_t k = 1; k <= h; ++k)
          if (a.at(k).digest() != b.at(k).digest()) {
            result_.safety_violations.push_back("RSUs " + std::to_string(honest[i]->id()) + " and " +
                                                std::to_string(honest[j]->id()) + " disagree at height " +
                                                std::to_string(k));
            break;
          }
      }
  }

  SimulationConfig cfg_;
  FeedbackHook feedback_;
  World world_;
  Simulator<Message> sim_;
  std::shared_ptr<const std::vector<PublicKey>> directory_;
  StakePool pool_;
  Committee committee_;
  std::vector<RsuNode> nodes_;
  MisbehaviorTracker tracker_;
  TokenLedger tokens_;
  std::set<RsuId> ever_byzantine_;

  std::optional<Chain> central_;
  KeyPair central_keys_;
  std::vector<std::vector<StatusRecord>> inboxes_;
  std::vector<std::pair<Transaction, std::uint64_t>> central_pending_;

  std::map<std::uint64_t, std::vector<ObservedProposal>> proposals_;
  std::map<std::uint64_t, std::vector<ValidationReply>> replies_;
  std::map<std::uint64_t, RoundRecord> rows_;
  std::set<std::pair<Digest, std::uint64_t>> seen_rejections_;
  SimulationResult result_;
};

inline SimulationResult run_simulation(const SimulationConfig& cfg, FeedbackHook feedback = {}) {
  return Simulation(cfg, std::move(feedback)).run();
}

}  // namespace best
