#pragma once

// Blocks, chains, the admission filter, and per-vehicle history queries.

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "best/crypto.hpp"
#include "best/telemetry.hpp"
#include "json.hpp"

namespace best {

inline constexpr std::size_t kDefaultBlockLimit = 8'000'000;  // 8 MB

struct Transaction {
  StatusRecord record;
  Digest digest;

  static Transaction from(StatusRecord record) {
    Transaction tx;
    tx.digest = best::digest(record.canonical_bytes());
    tx.record = std::move(record);
    return tx;
  }

  bool digest_matches() const { return digest == best::digest(record.canonical_bytes()); }
  std::size_t serialized_size() const { return record.canonical_bytes().size(); }

  friend bool operator==(const Transaction&, const Transaction&) = default;
};

// Binary Merkle tree over transaction digests; odd levels duplicate their
// last node. The empty tree has the all-zero root.
inline Digest merkle_root(std::vector<Digest> level) {
  if (level.empty()) return Digest{};
  while (level.size() > 1) {
    if (level.size() % 2 == 1) level.push_back(level.back());
    std::vector<Digest> next;
    next.reserve(level.size() / 2);
    for (std::size_t i = 0; i < level.size(); i += 2) {
      Bytes buf;
      buf.reserve(64);
      buf.insert(buf.end(), level[i].bytes.begin(), level[i].bytes.end());
      buf.insert(buf.end(), level[i + 1].bytes.begin(), level[i + 1].bytes.end());
      next.push_back(digest(buf));
    }
    level = std::move(next);
  }
  return level.front();
}

inline Digest merkle_root(const std::vector<Transaction>& txs) {
  std::vector<Digest> leaves;
  leaves.reserve(txs.size());
  for (const auto& tx : txs) leaves.push_back(tx.digest);
  return merkle_root(std::move(leaves));
}

struct Block {
  std::uint64_t height = 0;
  Digest prev_digest;
  PublicKey producer;
  Signature producer_signature;
  std::int64_t timestamp = 0;
  Digest tx_root;
  std::vector<Transaction> transactions;

  Bytes header_bytes() const {
    ByteWriter w;
    w.u64(height);
    w.fixed(prev_digest);
    w.fixed(producer);
    w.i64(timestamp);
    w.fixed(tx_root);
    return std::move(w).take();
  }

  // Block identity: digest of the header, which commits to the body through
  // tx_root.
  Digest digest() const { return best::digest(header_bytes()); }

  Bytes canonical_bytes() const {
    ByteWriter w;
    w.raw(header_bytes());
    w.fixed(producer_signature);
    w.u32(static_cast<std::uint32_t>(transactions.size()));
    for (const auto& tx : transactions) tx.record.write(w);
    return std::move(w).take();
  }

  static Block decode(ByteView bytes) {
    ByteReader r(bytes);
    Block b;
    b.height = r.u64();
    b.prev_digest = r.fixed<Digest>();
    b.producer = r.fixed<PublicKey>();
    b.timestamp = r.i64();
    b.tx_root = r.fixed<Digest>();
    b.producer_signature = r.fixed<Signature>();
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) b.transactions.push_back(Transaction::from(StatusRecord::read(r)));
    if (!r.done()) throw DecodeError("trailing bytes after block");
    return b;
  }

  std::size_t serialized_size() const { return canonical_bytes().size(); }
  bool is_genesis() const { return height == 0; }

  friend bool operator==(const Block&, const Block&) = default;
};

inline Block make_genesis() {
  Block g;
  g.tx_root = merkle_root(std::vector<Transaction>{});
  return g;
}

// Overhead of a block with no transactions.
inline std::size_t empty_block_size() { return make_genesis().serialized_size(); }

enum class AdmissionVerdict : std::uint8_t {
  Admit = 0,
  RejectUnknownIdentity = 1,
  RejectBadSignature = 2,
  RejectImplausible = 3,
  RejectStale = 4,
};

inline const char* to_string(AdmissionVerdict v) {
  switch (v) {
    case AdmissionVerdict::Admit: return "admit";
    case AdmissionVerdict::RejectUnknownIdentity: return "reject_unknown_identity";
    case AdmissionVerdict::RejectBadSignature: return "reject_bad_signature";
    case AdmissionVerdict::RejectImplausible: return "reject_implausible";
    case AdmissionVerdict::RejectStale: return "reject_stale";
  }
  return "?";
}

// Full: all four rules (the blockchain filter). SignatureOnly: signature
// check alone (the centralized store); unseen keys are enrolled on append.
enum class AdmissionPolicy : std::uint8_t { Full = 0, SignatureOnly = 1 };

inline const char* to_string(AdmissionPolicy p) {
  return p == AdmissionPolicy::Full ? "full" : "signature_only";
}

struct LedgerParams {
  AdmissionPolicy policy = AdmissionPolicy::Full;
  KinematicLimits limits;
  std::size_t block_limit = kDefaultBlockLimit;

  friend bool operator==(const LedgerParams&, const LedgerParams&) = default;
};

// ---------------------------------------------------------------------------
// Chain

class Chain {
 public:
  struct RecordRef {
    std::uint64_t height;
    std::uint32_t tx;
  };

  Chain() : Chain(LedgerParams{}, {}) {}

  Chain(LedgerParams params, std::vector<PublicKey> registry) : params_(params) {
    for (auto& k : registry) registry_.insert(k);
    blocks_.push_back(std::make_shared<const Block>(make_genesis()));
  }

  const LedgerParams& params() const { return params_; }
  const std::set<PublicKey>& registry() const { return registry_; }
  std::uint64_t height() const { return blocks_.size() - 1; }
  const Block& tip() const { return *blocks_.back(); }
  const Block& at(std::uint64_t h) const { return *blocks_.at(h); }
  const std::vector<std::shared_ptr<const Block>>& blocks() const { return blocks_; }
  std::shared_ptr<const Block> block_ptr(std::uint64_t h) const { return blocks_.at(h); }

  bool registered(const PublicKey& key) const {
    if (registry_.count(key)) return true;
    return params_.policy == AdmissionPolicy::SignatureOnly && index_.count(key);
  }

  const StatusRecord* latest(const PublicKey& key) const {
    auto it = index_.find(key);
    if (it == index_.end() || it->second.empty()) return nullptr;
    return &record(it->second.back());
  }

  std::int64_t tip_timestamp() const { return tip().timestamp; }

  const StatusRecord& record(RecordRef ref) const {
    return blocks_[ref.height]->transactions[ref.tx].record;
  }

  const std::map<PublicKey, std::vector<RecordRef>>& index() const { return index_; }

  std::size_t record_count() const {
    std::size_t n = 0;
    for (const auto& [k, refs] : index_) n += refs.size();
    return n;
  }

  // Appends a block whose linkage has already been validated. Linkage is
  // re-checked; content validation is the caller's job (validate_block).
  void append(std::shared_ptr<const Block> block) {
    if (block->height != height() + 1 || block->prev_digest != tip().digest())
      throw IntegrityViolation("append: block does not extend the tip");
    const std::uint64_t h = block->height;
    for (std::uint32_t i = 0; i < block->transactions.size(); ++i)
      index_[block->transactions[i].record.vehicle].push_back({h, i});
    blocks_.push_back(std::move(block));
  }
  void append(Block block) { append(std::make_shared<const Block>(std::move(block))); }

 private:
  LedgerParams params_;
  std::set<PublicKey> registry_;
  std::vector<std::shared_ptr<const Block>> blocks_;
  std::map<PublicKey, std::vector<RecordRef>> index_;
};

// A chain plus records tentatively accepted on top of it (e.g. the earlier
// transactions of a block under construction or validation).
class PendingView {
 public:
  explicit PendingView(const Chain& chain) : chain_(chain) {}

  const LedgerParams& params() const { return chain_.params(); }
  bool registered(const PublicKey& key) const {
    return chain_.registered(key) ||
           (params().policy == AdmissionPolicy::SignatureOnly && overlay_.count(key));
  }
  const StatusRecord* latest(const PublicKey& key) const {
    auto it = overlay_.find(key);
    if (it != overlay_.end()) return &it->second;
    return chain_.latest(key);
  }
  std::int64_t tip_timestamp() const { return chain_.tip_timestamp(); }
  void accept(const StatusRecord& r) { overlay_[r.vehicle] = r; }

 private:
  const Chain& chain_;
  std::map<PublicKey, StatusRecord> overlay_;
};

// Kinematic plausibility: absolute bounds on the reported state, and, when a
// previous on-chain record exists, bounded change since it.
inline bool kinematically_plausible(const StatusRecord& r, const StatusRecord* prev,
                                    const KinematicLimits& lim) {
  constexpr double kTol = 1e-9;
  const auto& s = r.state;
  if (!std::isfinite(s.velocity) || !std::isfinite(s.acceleration) ||
      !std::isfinite(s.position.x) || !std::isfinite(s.position.y))
    return false;
  if (s.velocity < -kTol || s.velocity > lim.v_max * (1 + kTol) + kTol) return false;
  if (std::abs(s.acceleration) > lim.a_max * (1 + kTol) + kTol) return false;
  if (!prev) return true;
  const double dt = static_cast<double>(r.timestamp - prev->timestamp);
  const double dv = std::abs(s.velocity - prev->state.velocity);
  if (dv > lim.a_max * dt * (1 + kTol) + kTol) return false;
  const double moved = distance(s.position, prev->state.position);
  const double reach = lim.v_max * dt + 0.5 * lim.a_max * dt * dt;
  return moved <= reach * (1 + kTol) + kTol;
}

// Rules, in order: (a) registered key, (b) valid signature, (c) timestamp
// newer than both the vehicle's latest on-chain record and the chain tip,
// (d) kinematic plausibility. SignatureOnly applies (b) alone.
template <typename View>
AdmissionVerdict admission_check(const StatusRecord& record, const View& view) {
  const LedgerParams& p = view.params();
  if (p.policy == AdmissionPolicy::SignatureOnly)
    return record.verify_signature() ? AdmissionVerdict::Admit : AdmissionVerdict::RejectBadSignature;
  if (!view.registered(record.vehicle)) return AdmissionVerdict::RejectUnknownIdentity;
  if (!record.verify_signature()) return AdmissionVerdict::RejectBadSignature;
  const StatusRecord* prev = view.latest(record.vehicle);
  if (record.timestamp <= view.tip_timestamp()) return AdmissionVerdict::RejectStale;
  if (prev && record.timestamp <= prev->timestamp) return AdmissionVerdict::RejectStale;
  if (!kinematically_plausible(record, prev, p.limits)) return AdmissionVerdict::RejectImplausible;
  return AdmissionVerdict::Admit;
}

// ---------------------------------------------------------------------------
// Block construction and validation

inline bool canonical_less(const Transaction& a, const Transaction& b) {
  if (a.record.timestamp != b.record.timestamp) return a.record.timestamp < b.record.timestamp;
  const Digest ia = digest(a.record.vehicle.view()), ib = digest(b.record.vehicle.view());
  if (ia != ib) return ia < ib;
  return a.digest < b.digest;
}

inline void canonical_sort(std::vector<Transaction>& txs) {
  // Precompute vehicle ids once; canonical_less hashes on every call.
  std::vector<std::pair<Digest, std::size_t>> keys;
  keys.reserve(txs.size());
  for (std::size_t i = 0; i < txs.size(); ++i) keys.push_back({digest(txs[i].record.vehicle.view()), i});
  std::vector<std::size_t> order(txs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ta = txs[a];
    const auto& tb = txs[b];
    if (ta.record.timestamp != tb.record.timestamp) return ta.record.timestamp < tb.record.timestamp;
    if (keys[a].first != keys[b].first) return keys[a].first < keys[b].first;
    return ta.digest < tb.digest;
  });
  std::vector<Transaction> sorted;
  sorted.reserve(txs.size());
  for (auto i : order) sorted.push_back(std::move(txs[i]));
  txs = std::move(sorted);
}

inline bool is_canonically_sorted(const std::vector<Transaction>& txs) {
  for (std::size_t i = 1; i < txs.size(); ++i)
    if (canonical_less(txs[i], txs[i - 1])) return false;
  return true;
}

struct BuildResult {
  Block block;
  std::vector<Transaction> spilled;
};

// Packs `pending` (in arrival order) into a signed block on top of `parent`.
// Transactions that do not fit under the size limit spill, in arrival order.
inline BuildResult build_block(std::vector<Transaction> pending, const Block& parent,
                               const KeyPair& producer, std::int64_t timestamp,
                               std::size_t block_limit = kDefaultBlockLimit) {
  const std::size_t overhead = empty_block_size();
  BuildResult out;
  std::size_t used = overhead;
  bool full = false;
  for (auto& tx : pending) {
    const std::size_t sz = tx.serialized_size();
    if (overhead + sz > block_limit)
      throw OversizedTransaction("transaction of " + std::to_string(sz) + " bytes exceeds the block limit");
    if (full || used + sz > block_limit) {
      full = true;
      out.spilled.push_back(std::move(tx));
      continue;
    }
    used += sz;
    out.block.transactions.push_back(std::move(tx));
  }
  canonical_sort(out.block.transactions);
  Block& b = out.block;
  b.height = parent.height + 1;
  b.prev_digest = parent.digest();
  b.producer = producer.identity.public_key;
  b.timestamp = timestamp;
  b.tx_root = merkle_root(b.transactions);
  b.producer_signature = producer.private_key.sign(b.header_bytes());
  return out;
}

// Structural checks that need no chain state.
inline bool block_well_formed(const Block& block, const Block& parent, std::size_t block_limit) {
  if (block.height != parent.height + 1) return false;
  if (block.prev_digest != parent.digest()) return false;
  if (block.timestamp <= parent.timestamp) return false;
  for (const auto& tx : block.transactions)
    if (!tx.digest_matches()) return false;
  if (block.tx_root != merkle_root(block.transactions)) return false;
  if (!is_canonically_sorted(block.transactions)) return false;
  if (block.serialized_size() > block_limit) return false;
  return verify(block.header_bytes(), block.producer_signature, block.producer);
}

// True iff the block extends `chain`'s tip, is well formed and signed, and
// every record re-passes admission against the chain (earlier records in the
// same block count as accepted).
inline bool validate_block(const Block& block, const Chain& chain) {
  if (!block_well_formed(block, chain.tip(), chain.params().block_limit)) return false;
  PendingView view(chain);
  for (const auto& tx : block.transactions) {
    if (admission_check(tx.record, view) != AdmissionVerdict::Admit) return false;
    view.accept(tx.record);
  }
  return true;
}

// The vehicle's most recent `window` admitted records, oldest first.
inline std::vector<StatusRecord> query_history(const Chain& chain, const PublicKey& vehicle,
                                               std::size_t window) {
  if (window < 1) throw std::invalid_argument("query_history: window must be >= 1");
  if (!chain.registered(vehicle)) throw UnknownVehicle("vehicle " + vehicle.hex() + " is not registered");
  std::vector<StatusRecord> out;
  auto it = chain.index().find(vehicle);
  if (it == chain.index().end()) return out;
  const auto& refs = it->second;
  const std::size_t start = refs.size() > window ? refs.size() - window : 0;
  for (std::size_t i = start; i < refs.size(); ++i) out.push_back(chain.record(refs[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Audit

// Re-derives every invariant from raw block contents. Returns a list of
// human-readable violations (empty when the chain is sound).
inline std::vector<std::string> audit_chain(const Chain& chain) {
  std::vector<std::string> problems;
  const auto& blocks = chain.blocks();
  if (blocks.empty() || !(*blocks.front() == make_genesis())) problems.push_back("genesis block mismatch");
  Chain replay(chain.params(), {chain.registry().begin(), chain.registry().end()});
  for (std::size_t h = 1; h < blocks.size(); ++h) {
    const Block& b = *blocks[h];
    const std::string where = "block " + std::to_string(h) + ": ";
    if (b.height != h) problems.push_back(where + "height mismatch");
    if (!block_well_formed(b, replay.tip(), chain.params().block_limit)) {
      problems.push_back(where + "structure, digest linkage, tx_root or signature invalid");
      break;
    }
    if (!validate_block(b, replay)) {
      problems.push_back(where + "contains a record the admission filter rejects");
      break;
    }
    replay.append(blocks[h]);
  }
  if (problems.empty()) {
    // Index must be exactly the set of records in blocks.
    std::size_t in_blocks = 0;
    for (std::size_t h = 1; h < blocks.size(); ++h) in_blocks += blocks[h]->transactions.size();
    if (in_blocks != chain.record_count()) problems.push_back("index size differs from block contents");
    for (const auto& [key, refs] : chain.index())
      for (const auto& ref : refs)
        if (chain.record(ref).vehicle != key) problems.push_back("index entry points at another vehicle");
  }
  return problems;
}

// ---------------------------------------------------------------------------
// JSONL dump: one block per line. The genesis line also carries the
// admission policy, limits and registry, plus a digest over them.

inline Digest ledger_config_digest(const LedgerParams& p, const std::set<PublicKey>& registry) {
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(p.policy));
  w.f64(p.limits.v_max);
  w.f64(p.limits.a_max);
  w.f64(p.limits.interval_s);
  w.u64(p.block_limit);
  w.u32(static_cast<std::uint32_t>(registry.size()));
  for (const auto& k : registry) w.fixed(k);
  return digest(w.data());
}

inline nlohmann::json block_to_json(const Block& b) {
  nlohmann::json txs = nlohmann::json::array();
  for (const auto& tx : b.transactions) txs.push_back({{"digest", tx.digest.hex()}, {"record", tx.record}});
  return {
      {"height", b.height},
      {"prev_digest", b.prev_digest.hex()},
      {"producer", b.producer.hex()},
      {"producer_signature", b.producer_signature.hex()},
      {"timestamp", b.timestamp},
      {"tx_root", b.tx_root.hex()},
      {"digest", b.digest().hex()},
      {"transactions", std::move(txs)},
  };
}

inline Block block_from_json(const nlohmann::json& j) {
  Block b;
  b.height = j.at("height").get<std::uint64_t>();
  b.prev_digest = Digest::from_hex(j.at("prev_digest").get<std::string>());
  b.producer = PublicKey::from_hex(j.at("producer").get<std::string>());
  b.producer_signature = Signature::from_hex(j.at("producer_signature").get<std::string>());
  b.timestamp = j.at("timestamp").get<std::int64_t>();
  b.tx_root = Digest::from_hex(j.at("tx_root").get<std::string>());
  for (const auto& t : j.at("transactions")) {
    Transaction tx;
    tx.record = t.at("record").get<StatusRecord>();
    tx.digest = Digest::from_hex(t.at("digest").get<std::string>());
    b.transactions.push_back(std::move(tx));
  }
  if (Digest::from_hex(j.at("digest").get<std::string>()) != b.digest())
    throw IntegrityViolation("block " + std::to_string(b.height) + ": stored digest mismatch");
  return b;
}

inline void write_chain_jsonl(std::ostream& os, const Chain& chain) {
  const auto& p = chain.params();
  for (const auto& bp : chain.blocks()) {
    nlohmann::json j = block_to_json(*bp);
    if (bp->is_genesis()) {
      nlohmann::json reg = nlohmann::json::array();
      for (const auto& k : chain.registry()) reg.push_back(k.hex());
      j["admission"] = to_string(p.policy);
      j["v_max"] = p.limits.v_max;
      j["a_max"] = p.limits.a_max;
      j["interval_s"] = p.limits.interval_s;
      j["block_limit"] = p.block_limit;
      j["registry"] = std::move(reg);
      j["config_digest"] = ledger_config_digest(p, chain.registry()).hex();
    }
    os << j.dump() << '\n';
  }
}

// Parses a dump and rebuilds the chain. Throws IntegrityViolation (or
// DecodeError) on anything malformed, including non-canonical text: every
// line must re-serialize to exactly the bytes read.
inline Chain read_chain_jsonl(std::istream& is) {
  std::string line;
  std::optional<Chain> chain;
  std::uint64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IntegrityViolation("line " + std::to_string(lineno) + ": not valid JSON");
    }
    if (j.dump() != line) throw IntegrityViolation("line " + std::to_string(lineno) + ": non-canonical encoding");
    try {
      Block b = block_from_json(j);
      if (!chain) {
        if (!b.is_genesis()) throw IntegrityViolation("first line is not the genesis block");
        LedgerParams p;
        const auto policy = j.at("admission").get<std::string>();
        if (policy == "full") p.policy = AdmissionPolicy::Full;
        else if (policy == "signature_only") p.policy = AdmissionPolicy::SignatureOnly;
        else throw IntegrityViolation("unknown admission policy");
        p.limits.v_max = j.at("v_max").get<double>();
        p.limits.a_max = j.at("a_max").get<double>();
        p.limits.interval_s = j.at("interval_s").get<double>();
        p.block_limit = j.at("block_limit").get<std::size_t>();
        std::vector<PublicKey> reg;
        for (const auto& k : j.at("registry")) reg.push_back(PublicKey::from_hex(k.get<std::string>()));
        Chain c(p, reg);
        if (c.registry().size() != reg.size()) throw IntegrityViolation("duplicate registry entries");
        if (Digest::from_hex(j.at("config_digest").get<std::string>()) != ledger_config_digest(p, c.registry()))
          throw IntegrityViolation("genesis configuration digest mismatch");
        if (!(b == make_genesis())) throw IntegrityViolation("genesis block mismatch");
        chain = std::move(c);
      } else {
        if (j.contains("registry")) throw IntegrityViolation("registry outside genesis line");
        chain->append(std::move(b));
      }
    } catch (const nlohmann::json::exception& e) {
      throw IntegrityViolation("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!chain) throw IntegrityViolation("empty chain dump");
  return std::move(*chain);
}

}  // namespace best
