#pragma once

// BFT-DPoS: stake-ranked committee election, pseudorandom round-robin
// producer schedule, signed validation replies with >2/3 finality, token
// rewards and penalties, misbehaviour-driven replacement, and the RSU node
// state machine that runs the protocol over netsim messages.

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "best/crypto.hpp"
#include "best/ledger.hpp"
#include "best/netsim.hpp"
#include "best/rng.hpp"

namespace best {

using RsuId = NodeId;

// ---------------------------------------------------------------------------
// Stake and committee

struct StakePool {
  std::map<RsuId, std::uint64_t> deposits;

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& [id, d] : deposits) t += d;
    return t;
  }

  Bytes canonical_bytes() const {
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(deposits.size()));
    for (const auto& [id, d] : deposits) {
      w.u32(id);
      w.u64(d);
    }
    return std::move(w).take();
  }

  std::uint64_t deposit(RsuId id) const {
    auto it = deposits.find(id);
    return it == deposits.end() ? 0 : it->second;
  }
};

struct Committee {
  std::vector<RsuId> crns;      // ranked: deposit descending, id ascending
  std::vector<RsuId> orns;      // ascending id
  std::vector<RsuId> schedule;  // producer order for this epoch
  std::uint64_t epoch = 0;
  std::uint64_t start_round = 0;

  std::size_t size() const { return crns.size(); }
  bool is_crn(RsuId id) const { return std::find(crns.begin(), crns.end(), id) != crns.end(); }

  RsuId producer_for(std::uint64_t round) const {
    if (schedule.empty()) throw std::logic_error("committee has no schedule");
    const std::uint64_t slot = round >= start_round ? round - start_round : 0;
    return schedule[slot % schedule.size()];
  }

  // Byzantine tolerance f = floor((M - 1) / 3).
  std::size_t fault_tolerance() const { return crns.empty() ? 0 : (crns.size() - 1) / 3; }

  friend bool operator==(const Committee&, const Committee&) = default;
};

inline std::vector<RsuId> rank_by_deposit(const StakePool& pool, const std::vector<RsuId>& ids) {
  std::vector<RsuId> out = ids;
  std::sort(out.begin(), out.end(), [&](RsuId a, RsuId b) {
    const auto da = pool.deposit(a), db = pool.deposit(b);
    if (da != db) return da > db;
    return a < b;
  });
  return out;
}

// Fisher-Yates over the ranked CRN list, driven by SplitMix64 seeded from
// the first 8 bytes (big-endian) of digest(pool bytes || epoch).
inline std::vector<RsuId> schedule_producers(const Committee& committee, const StakePool& pool) {
  if (committee.crns.empty()) throw std::invalid_argument("schedule_producers: empty committee");
  ByteWriter w;
  w.raw(pool.canonical_bytes());
  w.u64(committee.epoch);
  const Digest d = digest(w.data());
  std::uint64_t state = 0;
  for (int i = 0; i < 8; ++i) state = (state << 8) | d.bytes[i];
  std::vector<RsuId> s = committee.crns;
  for (std::size_t i = s.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(splitmix64(state) % i);
    std::swap(s[i - 1], s[j]);
  }
  return s;
}

inline Committee elect_committee(const StakePool& pool, std::size_t m) {
  if (m == 0) throw std::invalid_argument("elect_committee: M must be positive");
  if (pool.deposits.size() < m)
    throw InsufficientNodes("committee of " + std::to_string(m) + " needs at least that many RSUs, have " +
                            std::to_string(pool.deposits.size()));
  std::vector<RsuId> all;
  for (const auto& [id, d] : pool.deposits) all.push_back(id);
  const auto ranked = rank_by_deposit(pool, all);
  Committee c;
  c.crns.assign(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(m));
  c.orns.assign(ranked.begin() + static_cast<std::ptrdiff_t>(m), ranked.end());
  std::sort(c.orns.begin(), c.orns.end());
  c.schedule = schedule_producers(c, pool);
  return c;
}

// Returns violated invariants; empty when the committee is consistent.
inline std::vector<std::string> committee_problems(const Committee& c, const StakePool& pool, std::size_t m) {
  std::vector<std::string> out;
  std::set<RsuId> crn(c.crns.begin(), c.crns.end()), orn(c.orns.begin(), c.orns.end());
  if (c.crns.size() != m) out.push_back("|crns| != M");
  if (crn.size() != c.crns.size()) out.push_back("duplicate CRN");
  for (RsuId id : crn)
    if (orn.count(id)) out.push_back("RSU " + std::to_string(id) + " is both CRN and ORN");
  std::set<RsuId> all;
  for (const auto& [id, d] : pool.deposits) all.insert(id);
  std::set<RsuId> both = crn;
  both.insert(orn.begin(), orn.end());
  if (both != all) out.push_back("crns and orns do not cover all RSUs");
  auto a = c.schedule, b = c.crns;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (a != b) out.push_back("schedule is not a permutation of crns");
  return out;
}

// ---------------------------------------------------------------------------
// Validation replies and finality

struct ValidationReply {
  Digest block_digest;
  bool verdict = false;
  PublicKey validator;
  Signature signature;

  Bytes signed_bytes() const {
    ByteWriter w;
    w.fixed(block_digest);
    w.u8(verdict ? 1 : 0);
    return std::move(w).take();
  }

  static ValidationReply make(const Digest& block, bool verdict, const KeyPair& keys) {
    ValidationReply r;
    r.block_digest = block;
    r.verdict = verdict;
    r.validator = keys.identity.public_key;
    r.signature = keys.private_key.sign(r.signed_bytes());
    return r;
  }

  bool verify() const { return best::verify(signed_bytes(), signature, validator); }

  friend bool operator==(const ValidationReply&, const ValidationReply&) = default;
};

inline std::size_t finality_threshold(std::size_t m) { return 2 * m / 3; }
inline bool reaches_finality(std::size_t approvals, std::size_t m) { return approvals > finality_threshold(m); }

// The committee members' keys a round is judged against.
struct CommitteeKeys {
  std::map<PublicKey, RsuId> members;

  std::size_t size() const { return members.size(); }
  bool contains(const PublicKey& k) const { return members.count(k) != 0; }
};

inline CommitteeKeys committee_keys(const Committee& c, const std::vector<PublicKey>& directory) {
  CommitteeKeys k;
  for (RsuId id : c.crns) k.members.emplace(directory.at(id), id);
  return k;
}

enum class RoundOutcome : std::uint8_t { Pending = 0, Finalized = 1, Aborted = 2 };

inline const char* to_string(RoundOutcome o) {
  switch (o) {
    case RoundOutcome::Pending: return "pending";
    case RoundOutcome::Finalized: return "finalized";
    case RoundOutcome::Aborted: return "aborted";
  }
  return "?";
}

struct RoundState {
  std::uint64_t round = 0;
  RsuId producer = 0;
  std::shared_ptr<const Block> proposed;
  std::vector<ValidationReply> replies;
  RoundOutcome outcome = RoundOutcome::Pending;
};

struct Tally {
  std::size_t approvals = 0;  // includes the block signer when it is a member
  std::size_t rejections = 0;
  std::size_t outstanding = 0;
};

inline Tally tally(const RoundState& st, const CommitteeKeys& keys) {
  Tally t;
  const bool signer_member = st.proposed && keys.contains(st.proposed->producer);
  t.approvals = signer_member ? 1 : 0;
  for (const auto& r : st.replies) (r.verdict ? t.approvals : t.rejections) += 1;
  const std::size_t voters = keys.size() - (signer_member ? 1 : 0);
  t.outstanding = voters > st.replies.size() ? voters - st.replies.size() : 0;
  return t;
}

// Adds the acceptable replies (valid signature, committee member other than
// the block signer, matching digest, first reply per validator) and decides
// the round. Non-pending rounds are left alone.
inline RoundOutcome collect_and_finalize(RoundState& st, const std::vector<ValidationReply>& replies,
                                         const CommitteeKeys& keys, bool timer_expired = false) {
  if (st.outcome != RoundOutcome::Pending || !st.proposed) return st.outcome;
  const Digest d = st.proposed->digest();
  for (const auto& r : replies) {
    if (r.block_digest != d || !keys.contains(r.validator) || r.validator == st.proposed->producer) continue;
    const bool dup = std::any_of(st.replies.begin(), st.replies.end(),
                                 [&](const ValidationReply& x) { return x.validator == r.validator; });
    if (dup || !r.verify()) continue;
    st.replies.push_back(r);
  }
  const Tally t = tally(st, keys);
  const std::size_t m = keys.size();
  if (reaches_finality(t.approvals, m)) st.outcome = RoundOutcome::Finalized;
  else if (!reaches_finality(t.approvals + t.outstanding, m) || timer_expired) st.outcome = RoundOutcome::Aborted;
  return st.outcome;
}

// A finalized block with the approvals that finalized it.
struct Certificate {
  std::shared_ptr<const Block> block;
  std::vector<ValidationReply> approvals;
  std::uint64_t epoch = 0;
};

inline bool verify_certificate(const Certificate& c, const CommitteeKeys& keys) {
  if (!c.block || !verify(c.block->header_bytes(), c.block->producer_signature, c.block->producer)) return false;
  RoundState st;
  st.proposed = c.block;
  return collect_and_finalize(st, c.approvals, keys) == RoundOutcome::Finalized;
}

// ---------------------------------------------------------------------------
// Tokens. Amounts are integer micro-tokens so that splits conserve exactly.

inline constexpr std::int64_t kMicroTokens = 1'000'000;

struct RewardParams {
  std::int64_t r_crn = 7 * kMicroTokens;
  std::int64_t r_orn = 1 * kMicroTokens;
  std::int64_t penalty = 10 * kMicroTokens;
  std::uint32_t k_miss = 3;

  friend bool operator==(const RewardParams&, const RewardParams&) = default;
};

struct TokenEntry {
  std::uint64_t round = 0;
  RsuId rsu = 0;
  std::int64_t delta = 0;
  std::string reason;

  friend bool operator==(const TokenEntry&, const TokenEntry&) = default;
};

struct TokenLedger {
  std::map<RsuId, std::int64_t> balances;
  std::vector<TokenEntry> history;

  std::int64_t balance(RsuId id) const {
    auto it = balances.find(id);
    return it == balances.end() ? 0 : it->second;
  }

  void credit(std::uint64_t round, RsuId id, std::int64_t amount, std::string reason) {
    if (amount < 0) throw std::invalid_argument("credit: negative amount");
    if (amount == 0) return;
    balances[id] += amount;
    history.push_back({round, id, amount, std::move(reason)});
  }

  // Deductions floor the balance at zero; returns the amount taken.
  std::int64_t debit(std::uint64_t round, RsuId id, std::int64_t amount, std::string reason) {
    const std::int64_t taken = std::min(amount, balance(id));
    balances[id] -= taken;
    history.push_back({round, id, -taken, std::move(reason)});
    return taken;
  }

  std::map<RsuId, std::int64_t> replay() const {
    std::map<RsuId, std::int64_t> out;
    for (const auto& e : history) out[e.rsu] += e.delta;
    return out;
  }
};

// Splits `total` in proportion to `weights` (all-zero weights split evenly).
// Floors first, then hands the leftover units to the largest remainders;
// equal remainders go to the lower index.
inline std::vector<std::int64_t> split_largest_remainder(std::int64_t total, const std::vector<std::uint64_t>& weights) {
  const std::size_t n = weights.size();
  std::vector<std::int64_t> out(n, 0);
  if (n == 0 || total <= 0) return out;
  unsigned __int128 sum = 0;
  for (auto w : weights) sum += w;
  std::vector<unsigned __int128> rem(n);
  std::int64_t given = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned __int128 w = sum == 0 ? 1 : weights[i];
    const unsigned __int128 s = sum == 0 ? n : sum;
    const unsigned __int128 num = static_cast<unsigned __int128>(total) * w;
    out[i] = static_cast<std::int64_t>(num / s);
    rem[i] = num % s;
    given += out[i];
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; given < total; ++k, ++given) ++out[order[k % n]];
  return out;
}

// On Finalized, CRNs share r_crn by deposit and ORNs share r_orn evenly.
// Offenders lose `penalty` (floored at zero). With no ORNs, r_orn is not paid.
inline TokenLedger settle_round(RoundOutcome outcome, const Committee& committee, const StakePool& pool,
                                TokenLedger ledger, std::uint64_t round, const RewardParams& params = {},
                                const std::vector<RsuId>& offenders = {}) {
  if (outcome == RoundOutcome::Finalized) {
    std::vector<RsuId> crns = committee.crns;
    std::sort(crns.begin(), crns.end());
    std::vector<std::uint64_t> w;
    for (RsuId id : crns) w.push_back(pool.deposit(id));
    const auto crn_share = split_largest_remainder(params.r_crn, w);
    for (std::size_t i = 0; i < crns.size(); ++i) ledger.credit(round, crns[i], crn_share[i], "crn_reward");
    if (!committee.orns.empty()) {
      const auto orn_share =
          split_largest_remainder(params.r_orn, std::vector<std::uint64_t>(committee.orns.size(), 1));
      for (std::size_t i = 0; i < committee.orns.size(); ++i)
        ledger.credit(round, committee.orns[i], orn_share[i], "orn_dividend");
    }
  }
  for (RsuId id : offenders) ledger.debit(round, id, params.penalty, "penalty");
  return ledger;
}

// ---------------------------------------------------------------------------
// Misbehaviour

struct ObservedProposal {
  RsuId proposer = 0;
  std::shared_ptr<const Block> block;
};

// Signed protocol traffic seen during one round.
struct RoundEvents {
  std::uint64_t round = 0;
  RsuId producer = 0;  // scheduled producer
  std::vector<ObservedProposal> proposals;
  std::vector<ValidationReply> replies;
};

enum class Offence : std::uint8_t { InvalidBlock, Equivocation, MissedSlots };

inline const char* to_string(Offence o) {
  switch (o) {
    case Offence::InvalidBlock: return "invalid_block";
    case Offence::Equivocation: return "equivocation";
    case Offence::MissedSlots: return "missed_slots";
  }
  return "?";
}

struct MisbehaviorReport {
  RsuId rsu = 0;
  Offence offence = Offence::InvalidBlock;
};

struct MisbehaviorTracker {
  std::map<RsuId, std::uint32_t> consecutive_misses;
  std::set<RsuId> flagged;
  // (signer, block timestamp) -> first block digest seen.
  std::map<std::pair<PublicKey, std::int64_t>, Digest> signed_blocks;
};

struct GovernanceResult {
  Committee committee;
  std::vector<MisbehaviorReport> reports;
  bool new_epoch = false;
};

// Flags a CRN that (a) proposed a block at least f+1 committee validators
// rejected, (b) signed two different blocks with the same timestamp, or
// (c) missed k_miss consecutive production slots. Each flagged CRN is swapped
// for the best-ranked unflagged ORN; if any swap happened, the epoch advances
// and the schedule is redrawn starting at `next_round`.
inline GovernanceResult detect_misbehavior_and_replace(const RoundEvents& ev, const Committee& committee,
                                                       const StakePool& pool,
                                                       const std::vector<PublicKey>& directory,
                                                       MisbehaviorTracker& tracker, const RewardParams& params,
                                                       std::uint64_t next_round) {
  GovernanceResult out;
  out.committee = committee;
  const CommitteeKeys keys = committee_keys(committee, directory);
  std::set<RsuId> offenders_a, offenders_b;
  bool producer_acted = false;

  for (const auto& p : ev.proposals) {
    if (!p.block) continue;
    const Block& b = *p.block;
    if (!verify(b.header_bytes(), b.producer_signature, b.producer)) continue;
    if (p.proposer == ev.producer) producer_acted = true;
    // (b) equivocation, judged on the signer.
    auto signer = keys.members.find(b.producer);
    const Digest d = b.digest();
    auto [it, fresh] = tracker.signed_blocks.try_emplace({b.producer, b.timestamp}, d);
    if (!fresh && it->second != d && signer != keys.members.end()) offenders_b.insert(signer->second);
    // (a) rejected proposal, judged on the proposer.
    if (p.proposer != ev.producer) continue;
    std::set<PublicKey> rejecters;
    for (const auto& r : ev.replies)
      if (!r.verdict && r.block_digest == d && keys.contains(r.validator) && r.validator != directory.at(p.proposer) &&
          r.verify())
        rejecters.insert(r.validator);
    if (rejecters.size() >= committee.fault_tolerance() + 1) offenders_a.insert(p.proposer);
  }

  auto& misses = tracker.consecutive_misses[ev.producer];
  misses = producer_acted ? 0 : misses + 1;
  std::set<RsuId> offenders_c;
  if (committee.is_crn(ev.producer) && misses >= params.k_miss) {
    offenders_c.insert(ev.producer);
    misses = 0;
  }

  std::map<RsuId, Offence> flagged;
  for (RsuId id : offenders_c) flagged[id] = Offence::MissedSlots;
  for (RsuId id : offenders_a) flagged[id] = Offence::InvalidBlock;
  for (RsuId id : offenders_b) flagged[id] = Offence::Equivocation;

  Committee& c = out.committee;
  for (const auto& [id, offence] : flagged) {
    out.reports.push_back({id, offence});
    tracker.flagged.insert(id);
    if (!c.is_crn(id)) continue;
    std::vector<RsuId> candidates;
    for (RsuId o : c.orns)
      if (!tracker.flagged.count(o)) candidates.push_back(o);
    if (candidates.empty()) continue;  // nobody to take the seat
    const RsuId repl = rank_by_deposit(pool, candidates).front();
    std::replace(c.crns.begin(), c.crns.end(), id, repl);
    std::replace(c.orns.begin(), c.orns.end(), repl, id);
    out.new_epoch = true;
  }
  if (out.new_epoch) {
    c.crns = rank_by_deposit(pool, c.crns);
    std::sort(c.orns.begin(), c.orns.end());
    c.epoch += 1;
    c.start_round = next_round;
    c.schedule = schedule_producers(c, pool);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Messages

struct RecordMsg {
  StatusRecord record;
};

struct BatchMsg {
  std::uint64_t round = 0;
  std::shared_ptr<const std::vector<StatusRecord>> records;
};

struct ProposalMsg {
  std::uint64_t round = 0;
  std::uint64_t epoch = 0;
  std::shared_ptr<const Block> block;
  std::optional<Certificate> parent;  // lets a validator one block behind catch up
};

struct ReplyMsg {
  std::uint64_t round = 0;
  ValidationReply reply;
};

struct AnnounceMsg {
  Certificate cert;
};

struct SyncRequestMsg {
  std::uint64_t have_height = 0;
};

struct SyncResponseMsg {
  std::vector<Certificate> certs;
};

using Message =
    std::variant<RecordMsg, BatchMsg, ProposalMsg, ReplyMsg, AnnounceMsg, SyncRequestMsg, SyncResponseMsg>;

enum class MessageKind : std::uint8_t { Record, Batch, Proposal, Reply, Announce, SyncRequest, SyncResponse };
inline constexpr std::size_t kMessageKinds = 7;

inline MessageKind kind_of(const Message& m) { return static_cast<MessageKind>(m.index()); }

inline const char* to_string(MessageKind k) {
  static constexpr const char* kNames[] = {"record", "batch", "proposal", "reply", "announce", "sync_request",
                                           "sync_response"};
  return kNames[static_cast<std::size_t>(k)];
}

inline std::string short_hex(const Digest& d) { return d.hex().substr(0, 12); }

inline std::string describe(const Message& m) {
  std::string head = to_string(kind_of(m));
  return std::visit(
      [&](const auto& x) -> std::string {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, RecordMsg>)
          return head + " v=" + x.record.vehicle.hex().substr(0, 12) + " ts=" + std::to_string(x.record.timestamp);
        else if constexpr (std::is_same_v<T, BatchMsg>)
          return head + " r=" + std::to_string(x.round) + " n=" + std::to_string(x.records ? x.records->size() : 0);
        else if constexpr (std::is_same_v<T, ProposalMsg>)
          return head + " r=" + std::to_string(x.round) + " h=" + std::to_string(x.block->height) +
                 " d=" + short_hex(x.block->digest());
        else if constexpr (std::is_same_v<T, ReplyMsg>)
          return head + " r=" + std::to_string(x.round) + (x.reply.verdict ? " yes" : " no") +
                 " d=" + short_hex(x.reply.block_digest);
        else if constexpr (std::is_same_v<T, AnnounceMsg>)
          return head + " h=" + std::to_string(x.cert.block->height) + " d=" + short_hex(x.cert.block->digest());
        else if constexpr (std::is_same_v<T, SyncRequestMsg>)
          return head + " have=" + std::to_string(x.have_height);
        else
          return head + " n=" + std::to_string(x.certs.size());
      },
      m);
}

struct Outgoing {
  NodeId to;
  Message message;
};
using Outbox = std::vector<Outgoing>;

// ---------------------------------------------------------------------------
// Byzantine behaviour

enum class ByzantineMode : std::uint8_t {
  Honest,
  RejectAll,          // validator: replies false to every proposal
  ApproveAll,         // validator: replies true to every proposal, unchecked
  Silent,             // sends nothing at all
  Forge,              // producer: slips a tampered record into its block
  Equivocate,         // producer: signs two blocks, sends each to half
  Withhold,           // producer: never announces a finalized block
  SelectiveAnnounce,  // producer: announces to one RSU only
};

inline constexpr ByzantineMode kAllModes[] = {
    ByzantineMode::Honest,  ByzantineMode::RejectAll,  ByzantineMode::ApproveAll, ByzantineMode::Silent,
    ByzantineMode::Forge,   ByzantineMode::Equivocate, ByzantineMode::Withhold,   ByzantineMode::SelectiveAnnounce,
};

inline const char* to_string(ByzantineMode m) {
  switch (m) {
    case ByzantineMode::Honest: return "honest";
    case ByzantineMode::RejectAll: return "reject_all";
    case ByzantineMode::ApproveAll: return "approve_all";
    case ByzantineMode::Silent: return "silent";
    case ByzantineMode::Forge: return "forge";
    case ByzantineMode::Equivocate: return "equivocate";
    case ByzantineMode::Withhold: return "withhold";
    case ByzantineMode::SelectiveAnnounce: return "selective_announce";
  }
  return "?";
}

inline ByzantineMode parse_byzantine_mode(const std::string& s) {
  for (ByzantineMode m : kAllModes)
    if (s == to_string(m)) return m;
  throw ConfigInvalid("unknown byzantine mode '" + s + "'");
}

// ---------------------------------------------------------------------------
// RSU node

struct Rejection {
  Digest tx;
  std::uint64_t arrival_round = 0;
  AdmissionVerdict verdict = AdmissionVerdict::Admit;
  PublicKey vehicle;
};

class RsuNode {
 public:
  RsuNode(RsuId id, std::size_t rsu_count, KeyPair keys, std::shared_ptr<const std::vector<PublicKey>> directory,
          LedgerParams params, const std::vector<PublicKey>& registry, const Committee& committee)
      : id_(id), rsu_count_(rsu_count), keys_(std::move(keys)), directory_(std::move(directory)),
        chain_(params, registry) {
    install_committee(committee);
  }

  RsuId id() const { return id_; }
  const Chain& chain() const { return chain_; }
  const KeyPair& keys() const { return keys_; }
  ByzantineMode mode() const { return mode_; }
  void set_mode(ByzantineMode m) { mode_ = m; }
  const Committee& committee() const { return committees_.at(epoch_); }
  std::uint64_t epoch() const { return epoch_; }
  bool is_crn() const { return committee().is_crn(id_); }
  std::size_t pool_size() const { return pool_.size(); }
  const std::vector<std::string>& conflicts() const { return conflicts_; }
  const std::map<std::uint64_t, Certificate>& certificates() const { return certs_; }

  std::vector<Rejection> take_rejections() { return std::exchange(rejections_, {}); }

  void install_committee(const Committee& c) {
    committees_[c.epoch] = c;
    epoch_ = c.epoch;
  }

  // Vehicle record received directly by this RSU.
  void on_record(const StatusRecord& r) { inbox_.push_back(r); }

  // Forwards this round's vehicle records to every CRN.
  Outbox on_collect(std::uint64_t round) {
    Outbox out;
    auto batch = std::make_shared<const std::vector<StatusRecord>>(std::exchange(inbox_, {}));
    if (mode_ == ByzantineMode::Silent) return out;
    if (is_crn()) add_to_pool(*batch, round);
    for (RsuId crn : committee().crns)
      if (crn != id_) out.push_back({crn, BatchMsg{round, batch}});
    return out;
  }

  void on_batch(const BatchMsg& m) {
    if (is_crn() && m.records) add_to_pool(*m.records, m.round);
  }

  Outbox propose_block(std::uint64_t round) {
    const Committee& c = committee();
    if (c.producer_for(round) != id_)
      throw NotYourTurn("RSU " + std::to_string(id_) + " is not the producer of round " + std::to_string(round));
    Outbox out;
    current_round_ = round;
    active_.clear();
    if (mode_ == ByzantineMode::Silent) return out;

    std::shared_ptr<const Block> block;
    bool own = true;
    if (lock_ && lock_->height == chain_.height() + 1 && lock_->prev_digest == chain_.tip().digest()) {
      block = lock_;
      own = block->producer == keys_.identity.public_key;
    } else {
      std::vector<Transaction> admitted = admit_pool();
      if (mode_ == ByzantineMode::Forge) admitted.push_back(forged_transaction(admitted, round));
      auto built = build_block(admitted, chain_.tip(), keys_, static_cast<std::int64_t>(round),
                               chain_.params().block_limit);
      block = std::make_shared<const Block>(std::move(built.block));
      if (mode_ == ByzantineMode::Honest) lock_ = block;
      if (mode_ == ByzantineMode::Equivocate && !admitted.empty()) {
        admitted.pop_back();
        auto alt = build_block(admitted, chain_.tip(), keys_, static_cast<std::int64_t>(round),
                               chain_.params().block_limit);
        auto second = std::make_shared<const Block>(std::move(alt.block));
        std::vector<RsuId> validators;
        for (RsuId v : c.crns)
          if (v != id_) validators.push_back(v);
        std::sort(validators.begin(), validators.end());
        const std::size_t half = validators.size() / 2;
        for (std::size_t i = 0; i < validators.size(); ++i)
          out.push_back({validators[i], proposal(round, i < half ? block : second)});
        open_round(round, block, true);
        open_round(round, second, true);
        return out;
      }
    }
    open_round(round, block, own);
    for (RsuId v : c.crns)
      if (v != id_) out.push_back({v, proposal(round, block)});
    return out;
  }

  Outbox on_proposal(NodeId from, const ProposalMsg& m) {
    Outbox out;
    if (!is_crn() || m.epoch != epoch_ || !m.block || committee().producer_for(m.round) != from) return out;
    if (m.parent) apply_certificate(from, *m.parent, out);
    if (mode_ == ByzantineMode::Silent) return out;
    const Block& b = *m.block;
    const Digest d = b.digest();
    if (mode_ == ByzantineMode::RejectAll || mode_ == ByzantineMode::ApproveAll) {
      out.push_back({from, ReplyMsg{m.round, ValidationReply::make(d, mode_ == ByzantineMode::ApproveAll, keys_)}});
      return out;
    }
    if (!replied_rounds_.insert(m.round).second) return out;
    if (b.height > chain_.height() + 1) {
      out.push_back({from, SyncRequestMsg{chain_.height()}});
      return out;
    }
    if (b.height != chain_.height() + 1 || b.prev_digest != chain_.tip().digest()) return out;
    if (lock_ && lock_->height <= chain_.height()) lock_.reset();
    if (lock_ && lock_->height == b.height && lock_->digest() != d) return out;
    const bool ok = validate_block(b, chain_);
    if (ok && mode_ == ByzantineMode::Honest) lock_ = m.block;
    out.push_back({from, ReplyMsg{m.round, ValidationReply::make(d, ok, keys_)}});
    return out;
  }

  Outbox on_reply(NodeId, const ReplyMsg& m) {
    Outbox out;
    if (m.round != current_round_) return out;
    const CommitteeKeys keys = committee_keys(committee(), *directory_);
    for (auto& st : active_) {
      if (st.proposed->digest() != m.reply.block_digest) continue;
      if (collect_and_finalize(st, {m.reply}, keys) == RoundOutcome::Finalized && !announced_) finalize(st, out);
    }
    return out;
  }

  Outbox on_announce(NodeId from, const AnnounceMsg& m) {
    Outbox out;
    apply_certificate(from, m.cert, out);
    return out;
  }

  Outbox on_sync_request(NodeId from, const SyncRequestMsg& m) {
    Outbox out;
    if (mode_ == ByzantineMode::Silent) return out;
    SyncResponseMsg resp;
    for (auto it = certs_.upper_bound(m.have_height); it != certs_.end(); ++it) resp.certs.push_back(it->second);
    if (!resp.certs.empty()) out.push_back({from, std::move(resp)});
    return out;
  }

  Outbox on_sync_response(NodeId from, const SyncResponseMsg& m) {
    Outbox out;
    for (const auto& c : m.certs) apply_certificate(from, c, out);
    return out;
  }

  // Round timer: anything still pending is aborted. Its transactions never
  // left the pool, so the next producer retries them.
  void on_deadline(std::uint64_t round) {
    if (round != current_round_) return;
    const CommitteeKeys keys = committee_keys(committee(), *directory_);
    for (auto& st : active_) collect_and_finalize(st, {}, keys, true);
  }

  Outbox handle(NodeId from, const Message& msg) {
    return std::visit(
        [&](const auto& m) -> Outbox {
          using T = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<T, RecordMsg>) {
            on_record(m.record);
            return {};
          } else if constexpr (std::is_same_v<T, BatchMsg>) {
            on_batch(m);
            return {};
          } else if constexpr (std::is_same_v<T, ProposalMsg>) {
            return on_proposal(from, m);
          } else if constexpr (std::is_same_v<T, ReplyMsg>) {
            return on_reply(from, m);
          } else if constexpr (std::is_same_v<T, AnnounceMsg>) {
            return on_announce(from, m);
          } else if constexpr (std::is_same_v<T, SyncRequestMsg>) {
            return on_sync_request(from, m);
          } else {
            return on_sync_response(from, m);
          }
        },
        msg);
  }

 private:
  struct PoolEntry {
    Transaction tx;
    std::uint64_t arrival_round;
  };

  void add_to_pool(const std::vector<StatusRecord>& records, std::uint64_t round) {
    for (const auto& r : records) {
      Transaction tx = Transaction::from(r);
      if (!pool_index_.insert(tx.digest).second) continue;
      pool_.push_back({std::move(tx), round});
    }
  }

  // Runs admission over the pool in canonical order, drops and reports the
  // rejects, and returns the admitted transactions in arrival order.
  std::vector<Transaction> admit_pool() {
    std::vector<std::size_t> order(pool_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<Transaction> txs;
    for (const auto& e : pool_) txs.push_back(e.tx);
    std::vector<Transaction> sorted = txs;
    canonical_sort(sorted);
    std::map<Digest, std::size_t> pos;
    for (std::size_t i = 0; i < pool_.size(); ++i) pos.emplace(pool_[i].tx.digest, i);
    PendingView view(chain_);
    std::vector<bool> keep(pool_.size(), false);
    std::vector<bool> admit(pool_.size(), false);
    for (const auto& tx : sorted) {
      const std::size_t i = pos.at(tx.digest);
      const AdmissionVerdict v = admission_check(tx.record, view);
      if (v == AdmissionVerdict::Admit) {
        view.accept(tx.record);
        admit[i] = keep[i] = true;
      } else {
        rejections_.push_back({tx.digest, pool_[i].arrival_round, v, tx.record.vehicle});
      }
    }
    std::vector<Transaction> admitted;
    std::vector<PoolEntry> kept;
    for (std::size_t i = 0; i < pool_.size(); ++i) {
      if (admit[i]) admitted.push_back(pool_[i].tx);
      if (keep[i]) kept.push_back(std::move(pool_[i]));
      else pool_index_.erase(pool_[i].tx.digest);
    }
    pool_ = std::move(kept);
    return admitted;
  }

  // A record whose signature no longer matches its contents, or, with an
  // empty pool, one signed by a key nobody registered.
  Transaction forged_transaction(const std::vector<Transaction>& admitted, std::uint64_t round) const {
    StatusRecord r;
    if (!admitted.empty()) {
      r = admitted.front().record;
      r.state.velocity += 1.0;
    } else {
      const KeyPair stranger = generate_identity(derive_seed(round, 0xF0F0 + id_), IdentityKind::Vehicle);
      r.vehicle = stranger.identity.public_key;
      r.timestamp = static_cast<std::int64_t>(round);
      r.sign_with(stranger.private_key);
    }
    return Transaction::from(r);
  }

  ProposalMsg proposal(std::uint64_t round, std::shared_ptr<const Block> block) const {
    ProposalMsg p;
    p.round = round;
    p.epoch = epoch_;
    p.block = std::move(block);
    auto it = certs_.find(chain_.height());
    if (it != certs_.end()) p.parent = it->second;
    return p;
  }

  void open_round(std::uint64_t round, std::shared_ptr<const Block> block, bool own) {
    RoundState st;
    st.round = round;
    st.producer = id_;
    st.proposed = std::move(block);
    announced_ = false;
    const CommitteeKeys keys = committee_keys(committee(), *directory_);
    std::vector<ValidationReply> self;
    if (!own) self.push_back(ValidationReply::make(st.proposed->digest(), true, keys_));
    collect_and_finalize(st, self, keys);
    active_.push_back(std::move(st));
  }

  void finalize(const RoundState& st, Outbox& out) {
    announced_ = true;
    Certificate cert;
    cert.block = st.proposed;
    cert.epoch = epoch_;
    for (const auto& r : st.replies)
      if (r.verdict) cert.approvals.push_back(r);
    if (st.proposed->height == chain_.height() + 1 && st.proposed->prev_digest == chain_.tip().digest())
      commit(cert);
    if (mode_ == ByzantineMode::Withhold) return;
    for (RsuId r = 0; r < rsu_count_; ++r) {
      if (r == id_) continue;
      out.push_back({r, AnnounceMsg{cert}});
      if (mode_ == ByzantineMode::SelectiveAnnounce) break;
    }
  }

  void apply_certificate(NodeId from, const Certificate& cert, Outbox& out) {
    auto cit = committees_.find(cert.epoch);
    if (!cert.block || cit == committees_.end()) return;
    const Block& b = *cert.block;
    if (b.height <= chain_.height()) {
      if (chain_.at(b.height).digest() != b.digest())
        conflicts_.push_back("height " + std::to_string(b.height) + ": certified " + short_hex(b.digest()) +
                             " conflicts with local " + short_hex(chain_.at(b.height).digest()));
      return;
    }
    if (!verify_certificate(cert, committee_keys(cit->second, *directory_))) return;
    if (b.height > chain_.height() + 1) {
      future_.emplace(b.height, cert);
      if (mode_ != ByzantineMode::Silent) out.push_back({from, SyncRequestMsg{chain_.height()}});
      return;
    }
    if (b.prev_digest != chain_.tip().digest()) {
      conflicts_.push_back("height " + std::to_string(b.height) + ": certified block does not extend the tip");
      return;
    }
    commit(cert);
  }

  void commit(const Certificate& cert) {
    chain_.append(cert.block);
    certs_[cert.block->height] = cert;
    const std::int64_t tip_ts = chain_.tip_timestamp();
    std::set<Digest> included;
    for (const auto& tx : cert.block->transactions) included.insert(tx.digest);
    std::vector<PoolEntry> kept;
    for (auto& e : pool_) {
      if (included.count(e.tx.digest) || e.tx.record.timestamp <= tip_ts) pool_index_.erase(e.tx.digest);
      else kept.push_back(std::move(e));
    }
    pool_ = std::move(kept);
    if (lock_ && lock_->height <= chain_.height()) lock_.reset();
    // Buffered certificates that now extend the tip.
    for (auto it = future_.begin(); it != future_.end();) {
      if (it->first <= chain_.height()) {
        it = future_.erase(it);
      } else if (it->first == chain_.height() + 1 && it->second.block->prev_digest == chain_.tip().digest()) {
        Certificate next = it->second;
        future_.erase(it);
        commit(next);
        return;
      } else {
        break;
      }
    }
  }

  RsuId id_;
  std::size_t rsu_count_;
  KeyPair keys_;
  std::shared_ptr<const std::vector<PublicKey>> directory_;
  Chain chain_;
  std::map<std::uint64_t, Committee> committees_;
  std::uint64_t epoch_ = 0;
  ByzantineMode mode_ = ByzantineMode::Honest;

  std::vector<StatusRecord> inbox_;
  std::vector<PoolEntry> pool_;
  std::set<Digest> pool_index_;
  std::shared_ptr<const Block> lock_;
  std::set<std::uint64_t> replied_rounds_;
  std::map<std::uint64_t, Certificate> certs_;
  std::multimap<std::uint64_t, Certificate> future_;

  std::uint64_t current_round_ = 0;
  std::vector<RoundState> active_;
  bool announced_ = false;

  std::vector<Rejection> rejections_;
  std::vector<std::string> conflicts_;
};

}  // namespace best
