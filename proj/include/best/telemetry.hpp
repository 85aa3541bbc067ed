#pragma once

// Synthetic CAV world: constant-acceleration kinematics on straight lanes,
// per-second signed status records, nearest-RSU association, and the three
// forging behaviours used by malicious vehicles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "best/crypto.hpp"
#include "best/rng.hpp"
#include "json.hpp"

namespace best {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Vec2&, const Vec2&) = default;
};

inline double distance(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }
inline double distance_sq(Vec2 a, Vec2 b) {
  const double dx = a.x - b.x, dy = a.y - b.y;
  return dx * dx + dy * dy;
}

// Bounds shared by the world stepper and the ledger's plausibility rule.
// Velocities are stored in m/s throughout.
struct KinematicLimits {
  double v_max = 50.0 / 3.6;   // 50 km/h
  double a_max = 10.0;         // m/s^2
  double interval_s = 1.0;     // sharing period T

  friend bool operator==(const KinematicLimits&, const KinematicLimits&) = default;
};

// Reported when a vehicle has no other vehicle in the world.
inline constexpr double kNoNeighborDistance = 1.0e6;

struct VehicleState {
  Vec2 position;
  double velocity = 0.0;       // m/s along heading, never negative when honest
  double acceleration = 0.0;   // m/s^2, the vehicle's steady acceleration
  Vec2 heading{1.0, 0.0};
  std::uint32_t neighbor_count = 0;
  double min_distance = kNoNeighborDistance;

  friend bool operator==(const VehicleState&, const VehicleState&) = default;
};

struct Actions {
  bool brake = false;
  bool turn = false;

  friend bool operator==(const Actions&, const Actions&) = default;
};

struct StatusRecord {
  PublicKey vehicle;
  std::int64_t timestamp = 0;
  VehicleState state;
  Actions actions;
  std::optional<double> prior_vri;
  Signature signature;

  // Bytes covered by the signature.
  Bytes signed_bytes() const {
    ByteWriter w;
    write_unsigned(w);
    return std::move(w).take();
  }

  // Full canonical encoding (signed fields followed by the signature).
  Bytes canonical_bytes() const {
    ByteWriter w;
    write(w);
    return std::move(w).take();
  }

  void write(ByteWriter& w) const {
    write_unsigned(w);
    w.fixed(signature);
  }

  static StatusRecord read(ByteReader& r) {
    StatusRecord rec;
    rec.vehicle = r.fixed<PublicKey>();
    rec.timestamp = r.i64();
    rec.state.position = {r.f64(), r.f64()};
    rec.state.velocity = r.f64();
    rec.state.acceleration = r.f64();
    rec.state.heading = {r.f64(), r.f64()};
    rec.state.neighbor_count = r.u32();
    rec.state.min_distance = r.f64();
    const std::uint8_t flags = r.u8();
    if (flags > 3) throw DecodeError("unknown action flags");
    rec.actions.brake = (flags & 1) != 0;
    rec.actions.turn = (flags & 2) != 0;
    const std::uint8_t has_vri = r.u8();
    if (has_vri > 1) throw DecodeError("bad prior_vri tag");
    const double vri = r.f64();
    if (has_vri) rec.prior_vri = vri;
    else if (std::bit_cast<std::uint64_t>(vri) != 0) throw DecodeError("absent prior_vri must be zero");
    rec.signature = r.fixed<Signature>();
    return rec;
  }

  static StatusRecord decode(ByteView bytes) {
    ByteReader r(bytes);
    StatusRecord rec = read(r);
    if (!r.done()) throw DecodeError("trailing bytes after record");
    return rec;
  }

  void sign_with(const PrivateKey& key) { signature = key.sign(signed_bytes()); }
  bool verify_signature() const { return best::verify(signed_bytes(), signature, vehicle); }

  friend bool operator==(const StatusRecord&, const StatusRecord&) = default;

 private:
  void write_unsigned(ByteWriter& w) const {
    w.fixed(vehicle);
    w.i64(timestamp);
    w.f64(state.position.x);
    w.f64(state.position.y);
    w.f64(state.velocity);
    w.f64(state.acceleration);
    w.f64(state.heading.x);
    w.f64(state.heading.y);
    w.u32(state.neighbor_count);
    w.f64(state.min_distance);
    w.u8(static_cast<std::uint8_t>((actions.brake ? 1 : 0) | (actions.turn ? 2 : 0)));
    w.u8(prior_vri ? 1 : 0);
    w.f64(prior_vri.value_or(0.0));
  }
};

inline void to_json(nlohmann::json& j, const StatusRecord& r) {
  j = nlohmann::json{
      {"vehicle", r.vehicle.hex()},
      {"timestamp", r.timestamp},
      {"position", {r.state.position.x, r.state.position.y}},
      {"velocity", r.state.velocity},
      {"acceleration", r.state.acceleration},
      {"heading", {r.state.heading.x, r.state.heading.y}},
      {"neighbor_count", r.state.neighbor_count},
      {"min_distance", r.state.min_distance},
      {"brake", r.actions.brake},
      {"turn", r.actions.turn},
      {"prior_vri", r.prior_vri ? nlohmann::json(*r.prior_vri) : nlohmann::json(nullptr)},
      {"signature", r.signature.hex()},
  };
}

inline void from_json(const nlohmann::json& j, StatusRecord& r) {
  r.vehicle = PublicKey::from_hex(j.at("vehicle").get<std::string>());
  r.timestamp = j.at("timestamp").get<std::int64_t>();
  const auto& pos = j.at("position");
  r.state.position = {pos.at(0).get<double>(), pos.at(1).get<double>()};
  r.state.velocity = j.at("velocity").get<double>();
  r.state.acceleration = j.at("acceleration").get<double>();
  const auto& hd = j.at("heading");
  r.state.heading = {hd.at(0).get<double>(), hd.at(1).get<double>()};
  r.state.neighbor_count = j.at("neighbor_count").get<std::uint32_t>();
  r.state.min_distance = j.at("min_distance").get<double>();
  r.actions.brake = j.at("brake").get<bool>();
  r.actions.turn = j.at("turn").get<bool>();
  const auto& vri = j.at("prior_vri");
  if (vri.is_null()) r.prior_vri.reset();
  else r.prior_vri = vri.get<double>();
  r.signature = Signature::from_hex(j.at("signature").get<std::string>());
}

// ---------------------------------------------------------------------------
// World

enum class BehaviorProfile : std::uint8_t {
  Honest = 0,
  ForgerUnregistered = 1,
  ForgerImplausible = 2,
  ForgerReplay = 3,
};

inline const char* to_string(BehaviorProfile p) {
  switch (p) {
    case BehaviorProfile::Honest: return "honest";
    case BehaviorProfile::ForgerUnregistered: return "forger_unregistered";
    case BehaviorProfile::ForgerImplausible: return "forger_implausible";
    case BehaviorProfile::ForgerReplay: return "forger_replay";
  }
  return "?";
}

struct ProfileMix {
  double unregistered = 0.0;
  double implausible = 1.0;
  double replay = 0.0;

  friend bool operator==(const ProfileMix&, const ProfileMix&) = default;
};

struct WorldConfig {
  std::uint64_t seed = 1;
  std::uint32_t rsu_count = 20;
  std::uint32_t cav_count = 300;
  std::uint32_t malicious_count = 0;
  ProfileMix mix;
  double area_m = 2000.0;
  double neighbor_radius_m = 50.0;
  double initial_speed_max = 50.0 / 3.6;
  KinematicLimits limits;
  // Implausible forgers report true speed plus this multiple of v_max.
  double overspeed_min = 1.2;
  double overspeed_max = 2.0;
  // Replay forgers resubmit their own record from this many seconds ago.
  std::int64_t replay_lag_s = 3;

  friend bool operator==(const WorldConfig&, const WorldConfig&) = default;
};

struct Rsu {
  std::uint32_t id = 0;
  Vec2 position;
};

struct Vehicle {
  std::uint32_t index = 0;
  KeyPair keys;
  BehaviorProfile profile = BehaviorProfile::Honest;
  VehicleState state;              // true physical state
  std::optional<double> prior_vri;
  double overspeed = 0.0;          // ForgerImplausible only
  std::map<std::int64_t, StatusRecord> own_records;  // ForgerReplay only

  const PublicKey& key() const { return keys.identity.public_key; }
  bool malicious() const { return profile != BehaviorProfile::Honest; }
};

struct Emission {
  StatusRecord record;
  std::uint32_t rsu = 0;
  std::uint32_t vehicle_index = 0;
};

// Splits `count` between the profile weights by largest remainder.
inline std::vector<BehaviorProfile> assign_profiles(std::uint32_t count, const ProfileMix& mix) {
  const double weights[3] = {mix.unregistered, mix.implausible, mix.replay};
  const BehaviorProfile kinds[3] = {BehaviorProfile::ForgerUnregistered,
                                    BehaviorProfile::ForgerImplausible,
                                    BehaviorProfile::ForgerReplay};
  double total = weights[0] + weights[1] + weights[2];
  std::vector<BehaviorProfile> out;
  if (count == 0) return out;
  if (total <= 0.0) throw ConfigInvalid("world.mix: weights must sum to a positive value");
  std::uint32_t n[3];
  double rem[3];
  std::uint32_t assigned = 0;
  for (int k = 0; k < 3; ++k) {
    const double exact = count * weights[k] / total;
    n[k] = static_cast<std::uint32_t>(std::floor(exact));
    rem[k] = exact - n[k];
    assigned += n[k];
  }
  while (assigned < count) {
    int best = 0;
    for (int k = 1; k < 3; ++k)
      if (rem[k] > rem[best]) best = k;
    ++n[best];
    rem[best] = -1.0;
    ++assigned;
  }
  for (int k = 0; k < 3; ++k) out.insert(out.end(), n[k], kinds[k]);
  return out;
}

// Nearest RSU by Euclidean distance; equal distances go to the lower id.
inline std::uint32_t nearest_rsu(Vec2 p, const std::vector<Rsu>& rsus) {
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (const Rsu& r : rsus) {
    const double d = distance_sq(p, r.position);
    if (d < best_d || (d == best_d && r.id < best)) {
      best_d = d;
      best = r.id;
    }
  }
  return best;
}

// Displacement and end velocity under constant acceleration with the speed
// clamped to [0, v_max]. Once the clamp is hit the vehicle cruises (or stays
// stopped) for the rest of the step.
struct KinematicStep {
  double velocity;
  double displacement;
};

inline KinematicStep integrate(double v, double a, double dt, double v_max) {
  const double free_v = v + a * dt;
  if (free_v >= 0.0 && free_v <= v_max) return {free_v, v * dt + 0.5 * a * dt * dt};
  const double bound = free_v < 0.0 ? 0.0 : v_max;
  const double tau = (bound - v) / a;  // a != 0 here, since v itself is in range
  const double s = v * tau + 0.5 * a * tau * tau + bound * (dt - tau);
  return {bound, s};
}

class World {
 public:
  World() = default;

  explicit World(const WorldConfig& cfg) : cfg_(cfg) {
    place_rsus();
    // Honest and malicious populations draw from separate streams so that
    // changing the malicious count leaves the honest CAVs untouched.
    Rng honest_rng(derive_seed(cfg.seed, 0x1001));
    Rng mal_rng(derive_seed(cfg.seed, 0x1002));
    const auto profiles = assign_profiles(cfg.malicious_count, cfg.mix);
    const std::uint32_t total = cfg.cav_count + cfg.malicious_count;
    vehicles_.reserve(total);
    for (std::uint32_t i = 0; i < total; ++i) {
      const bool mal = i >= cfg.cav_count;
      Rng& rng = mal ? mal_rng : honest_rng;
      Vehicle v;
      v.index = i;
      v.keys = generate_identity(derive_seed(cfg.seed, 0x10000 + i), IdentityKind::Vehicle);
      v.profile = mal ? profiles[i - cfg.cav_count] : BehaviorProfile::Honest;
      v.state.position = {rng.uniform(0.0, cfg.area_m), rng.uniform(0.0, cfg.area_m)};
      static constexpr Vec2 kHeadings[4] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
      v.state.heading = kHeadings[rng.below(4)];
      v.state.velocity = rng.uniform(0.0, cfg.initial_speed_max);
      v.state.acceleration = rng.uniform(-cfg.limits.a_max, cfg.limits.a_max);
      v.overspeed = rng.uniform(cfg.overspeed_min, cfg.overspeed_max);
      vehicles_.push_back(std::move(v));
    }
    refresh_neighbors();
    for (Vehicle& v : vehicles_)
      if (v.profile == BehaviorProfile::ForgerReplay) v.own_records[0] = honest_record(v, 0);
  }

  const WorldConfig& config() const { return cfg_; }
  const std::vector<Vehicle>& vehicles() const { return vehicles_; }
  std::vector<Vehicle>& vehicles() { return vehicles_; }
  const std::vector<Rsu>& rsus() const { return rsus_; }
  double clock() const { return clock_s_; }

  // Keys the registration authority knows about. Unregistered forgers are
  // by construction absent.
  std::vector<PublicKey> registry() const {
    std::vector<PublicKey> keys;
    for (const Vehicle& v : vehicles_)
      if (v.profile != BehaviorProfile::ForgerUnregistered) keys.push_back(v.key());
    std::sort(keys.begin(), keys.end());
    return keys;
  }

  void advance(double dt) {
    if (!(dt > 0.0)) throw std::invalid_argument("step_world: dt must be positive");
    for (Vehicle& v : vehicles_) {
      const auto step = integrate(v.state.velocity, v.state.acceleration, dt, cfg_.limits.v_max);
      v.state.velocity = step.velocity;
      v.state.position.x += v.state.heading.x * step.displacement;
      v.state.position.y += v.state.heading.y * step.displacement;
    }
    clock_s_ += dt;
    refresh_neighbors();
  }

  void set_prior_vri(std::uint32_t vehicle_index, double vri) {
    vehicles_.at(vehicle_index).prior_vri = vri;
  }

  // Record for vehicle `v` as an honest sender would produce it.
  StatusRecord honest_record(const Vehicle& v, std::int64_t t) const {
    StatusRecord r;
    r.vehicle = v.key();
    r.timestamp = t;
    r.state = v.state;
    r.actions.brake = v.state.acceleration < 0.0 && v.state.velocity > 0.0;
    r.actions.turn = false;  // lanes are straight
    r.prior_vri = v.prior_vri;
    r.sign_with(v.keys.private_key);
    return r;
  }

  // Keeps the per-vehicle bookkeeping the replay forger draws from.
  void remember(const Vehicle& v, std::int64_t t) {
    if (v.profile == BehaviorProfile::ForgerReplay)
      vehicles_[v.index].own_records[t] = honest_record(v, t);
  }

 private:
  void place_rsus() {
    const std::uint32_t n = cfg_.rsu_count;
    if (n == 0) return;
    const auto cols = static_cast<std::uint32_t>(std::ceil(std::sqrt(static_cast<double>(n))));
    const std::uint32_t rows = (n + cols - 1) / cols;
    const double dx = cfg_.area_m / cols, dy = cfg_.area_m / rows;
    for (std::uint32_t id = 0; id < n; ++id) {
      const std::uint32_t c = id % cols, r = id / cols;
      rsus_.push_back({id, {(c + 0.5) * dx, (r + 0.5) * dy}});
    }
  }

  void refresh_neighbors() {
    const std::size_t n = vehicles_.size();
    const double r2 = cfg_.neighbor_radius_m * cfg_.neighbor_radius_m;
    std::vector<double> best(n, std::numeric_limits<double>::infinity());
    std::vector<std::uint32_t> count(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double d2 = distance_sq(vehicles_[i].state.position, vehicles_[j].state.position);
        best[i] = std::min(best[i], d2);
        best[j] = std::min(best[j], d2);
        if (d2 <= r2) {
          ++count[i];
          ++count[j];
        }
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      vehicles_[i].state.neighbor_count = count[i];
      vehicles_[i].state.min_distance =
          std::isinf(best[i]) ? kNoNeighborDistance : std::sqrt(best[i]);
    }
  }

  WorldConfig cfg_;
  std::vector<Rsu> rsus_;
  std::vector<Vehicle> vehicles_;
  double clock_s_ = 0.0;
};

inline World step_world(World world, double dt) {
  world.advance(dt);
  return world;
}

// A malicious vehicle's submission at time t. Each profile breaks exactly one
// admission rule:
//   ForgerUnregistered - true state, signed by a key the registry never saw;
//   ForgerImplausible  - correctly signed, speed reported above v_max;
//   ForgerReplay       - its own record from `replay_lag_s` seconds ago
//                        (timestamp 0 while the run is younger than that).
inline StatusRecord forge_record(BehaviorProfile profile, const World& world,
                                 const Vehicle& v, std::int64_t t) {
  switch (profile) {
    case BehaviorProfile::Honest:
      throw std::invalid_argument("forge_record: profile must not be Honest");
    case BehaviorProfile::ForgerUnregistered:
      return world.honest_record(v, t);
    case BehaviorProfile::ForgerImplausible: {
      StatusRecord r;
      r.vehicle = v.key();
      r.timestamp = t;
      r.state = v.state;
      const double v_max = world.config().limits.v_max;
      r.state.velocity = v.state.velocity + v.overspeed * v_max;
      r.state.acceleration = std::abs(v.state.acceleration);
      r.actions = {};
      r.prior_vri = v.prior_vri;
      r.sign_with(v.keys.private_key);
      return r;
    }
    case BehaviorProfile::ForgerReplay: {
      const std::int64_t stale = std::max<std::int64_t>(0, t - world.config().replay_lag_s);
      auto it = v.own_records.upper_bound(stale);
      if (it == v.own_records.begin()) throw std::logic_error("replay forger has no history");
      return std::prev(it)->second;
    }
  }
  throw std::logic_error("unreachable");
}

// One record per vehicle, addressed to its nearest RSU. `t` must match the
// world clock.
inline std::vector<Emission> emit_records(World& world, std::int64_t t) {
  if (std::abs(world.clock() - static_cast<double>(t)) > 1e-9)
    throw std::invalid_argument("emit_records: t differs from the world clock");
  std::vector<Emission> out;
  out.reserve(world.vehicles().size());
  for (const Vehicle& v : world.vehicles()) {
    world.remember(v, t);
    Emission e;
    e.vehicle_index = v.index;
    e.rsu = nearest_rsu(v.state.position, world.rsus());
    e.record = v.malicious() ? forge_record(v.profile, world, v, t) : world.honest_record(v, t);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace best
