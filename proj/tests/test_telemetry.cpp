#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "best/telemetry.hpp"

using namespace best;

namespace {

WorldConfig small_config(std::uint32_t cavs, std::uint32_t malicious = 0) {
  WorldConfig c;
  c.seed = 11;
  c.cav_count = cavs;
  c.malicious_count = malicious;
  return c;
}

}  // namespace

TEST(Kinematics, ConstantAccelerationStep) {
  const auto s = integrate(10.0, 2.0, 1.0, 50.0);
  EXPECT_DOUBLE_EQ(s.velocity, 12.0);
  EXPECT_DOUBLE_EQ(s.displacement, 11.0);
}

TEST(Kinematics, ClampsAtZero) {
  const auto s = integrate(1.0, -10.0, 1.0, 50.0);
  EXPECT_EQ(s.velocity, 0.0);
  EXPECT_DOUBLE_EQ(s.displacement, 0.05);  // stops after 0.1 s
}

TEST(Kinematics, ClampsAtVmax) {
  const double vmax = 50.0 / 3.6;
  const auto s = integrate(vmax - 1.0, 10.0, 1.0, vmax);
  EXPECT_DOUBLE_EQ(s.velocity, vmax);
  // 0.1 s of acceleration then cruise.
  EXPECT_NEAR(s.displacement, (vmax - 1.0) * 0.1 + 0.5 * 10 * 0.01 + vmax * 0.9, 1e-12);
}

TEST(World, StepRejectsNonPositiveDt) {
  World w(small_config(3));
  EXPECT_THROW(w.advance(0.0), std::invalid_argument);
}

TEST(World, RsusOnFiveByFourGrid) {
  World w(small_config(1));
  ASSERT_EQ(w.rsus().size(), 20u);
  std::set<double> xs, ys;
  for (const auto& r : w.rsus()) {
    xs.insert(r.position.x);
    ys.insert(r.position.y);
  }
  EXPECT_EQ(xs.size(), 5u);
  EXPECT_EQ(ys.size(), 4u);
}

TEST(World, MinDistanceAndNeighborsMatchBruteForce) {
  World w(small_config(300));
  for (int step = 0; step < 3; ++step) {
    const auto& vs = w.vehicles();
    for (std::size_t i = 0; i < vs.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::uint32_t count = 0;
      for (std::size_t j = 0; j < vs.size(); ++j) {
        if (i == j) continue;
        const double d = std::sqrt(std::pow(vs[i].state.position.x - vs[j].state.position.x, 2) +
                                   std::pow(vs[i].state.position.y - vs[j].state.position.y, 2));
        best = std::min(best, d);
        if (d <= 50.0) ++count;
      }
      EXPECT_NEAR(vs[i].state.min_distance, best, 1e-9);
      EXPECT_EQ(vs[i].state.neighbor_count, count);
    }
    w.advance(1.0);
  }
}

TEST(World, VelocityStaysInBounds) {
  World w(small_config(300));
  for (int s = 0; s < 20; ++s) {
    w.advance(1.0);
    for (const auto& v : w.vehicles()) {
      EXPECT_GE(v.state.velocity, 0.0);
      EXPECT_LE(v.state.velocity, w.config().limits.v_max);
    }
  }
}

TEST(World, ZeroAccelerationParallelLanesKeepDistance) {
  WorldConfig c = small_config(2);
  World w(c);
  auto& vs = w.vehicles();
  vs[0].state = VehicleState{{100, 100}, 5.0, 0.0, {1, 0}, 0, 0};
  vs[1].state = VehicleState{{120, 103}, 5.0, 0.0, {1, 0}, 0, 0};
  w.advance(1.0);
  const double d0 = vs[0].state.min_distance;
  for (int s = 1; s <= 10; ++s) {
    const Vec2 p = vs[0].state.position;
    w.advance(1.0);
    EXPECT_NEAR(vs[0].state.position.x - p.x, 5.0, 1e-12);
    EXPECT_NEAR(vs[0].state.min_distance, d0, 1e-9);
    EXPECT_NEAR(vs[1].state.min_distance, d0, 1e-9);
  }
}

TEST(Association, TieGoesToLowerRsuId) {
  std::vector<Rsu> rsus{{0, {0, 0}}, {1, {10, 0}}, {2, {5, 100}}};
  EXPECT_EQ(nearest_rsu({5, 0}, rsus), 0u);
  std::vector<Rsu> reversed{{3, {10, 0}}, {1, {0, 0}}};
  EXPECT_EQ(nearest_rsu({5, 0}, reversed), 1u);
}

TEST(Association, MatchesExhaustiveSearch) {
  World w(small_config(300));
  w.advance(1.0);
  const auto out = emit_records(w, 1);
  for (const auto& e : out) {
    const Vec2 p = w.vehicles()[e.vehicle_index].state.position;
    std::uint32_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (const auto& r : w.rsus()) {
      const double d = std::hypot(p.x - r.position.x, p.y - r.position.y);
      if (d < bd || (d == bd && r.id < best)) {
        bd = d;
        best = r.id;
      }
    }
    EXPECT_EQ(e.rsu, best);
  }
}

TEST(Emission, OneSignedRecordPerVehicle) {
  World w(small_config(300, 50));
  for (std::int64_t t = 1; t <= 5; ++t) {
    w.advance(1.0);
    const auto out = emit_records(w, t);
    ASSERT_EQ(out.size(), 350u);
    std::set<std::uint32_t> seen;
    for (const auto& e : out) {
      EXPECT_TRUE(seen.insert(e.vehicle_index).second);
      const auto& v = w.vehicles()[e.vehicle_index];
      if (!v.malicious()) {
        EXPECT_TRUE(e.record.verify_signature());
        EXPECT_EQ(e.record.timestamp, t);
        EXPECT_EQ(e.record.state, v.state);
      }
    }
  }
}

TEST(Emission, RejectsWrongClock) {
  World w(small_config(3));
  EXPECT_THROW(emit_records(w, 1), std::invalid_argument);
}

TEST(Emission, DeterministicStreams) {
  auto stream = [] {
    World w(small_config(50, 10));
    std::vector<Bytes> out;
    for (std::int64_t t = 1; t <= 4; ++t) {
      w.advance(1.0);
      for (const auto& e : emit_records(w, t)) out.push_back(e.record.canonical_bytes());
    }
    return out;
  };
  EXPECT_EQ(stream(), stream());
}

TEST(Emission, MaliciousCountLeavesHonestStreamUntouched) {
  auto honest = [](std::uint32_t mal) {
    World w(small_config(40, mal));
    w.advance(1.0);
    std::vector<Bytes> out;
    for (const auto& e : emit_records(w, 1))
      if (e.vehicle_index < 40) out.push_back(e.record.signed_bytes());
    return out;
  };
  // Neighbour features change with extra vehicles, so compare identities and
  // kinematics only.
  World a(small_config(40, 0)), b(small_config(40, 25));
  for (std::uint32_t i = 0; i < 40; ++i) {
    EXPECT_EQ(a.vehicles()[i].key(), b.vehicles()[i].key());
    EXPECT_EQ(a.vehicles()[i].state.position, b.vehicles()[i].state.position);
    EXPECT_EQ(a.vehicles()[i].state.velocity, b.vehicles()[i].state.velocity);
  }
  EXPECT_EQ(honest(0).size(), 40u);
}

TEST(Forgery, ProfilesBehaveAsDocumented) {
  WorldConfig c = small_config(10, 9);
  c.mix = {1, 1, 1};
  World w(c);
  const auto registry = w.registry();
  std::set<PublicKey> reg(registry.begin(), registry.end());
  for (std::int64_t t = 1; t <= 5; ++t) {
    w.advance(1.0);
    for (const auto& e : emit_records(w, t)) {
      const auto& v = w.vehicles()[e.vehicle_index];
      switch (v.profile) {
        case BehaviorProfile::Honest: EXPECT_TRUE(reg.count(v.key())); break;
        case BehaviorProfile::ForgerUnregistered:
          EXPECT_FALSE(reg.count(e.record.vehicle));
          EXPECT_TRUE(e.record.verify_signature());
          break;
        case BehaviorProfile::ForgerImplausible:
          EXPECT_TRUE(e.record.verify_signature());
          EXPECT_GT(e.record.state.velocity, 1.2 * c.limits.v_max - 1e-9);
          break;
        case BehaviorProfile::ForgerReplay:
          EXPECT_TRUE(e.record.verify_signature());
          EXPECT_EQ(e.record.timestamp, std::max<std::int64_t>(0, t - 3));
          break;
      }
    }
  }
  EXPECT_THROW(forge_record(BehaviorProfile::Honest, w, w.vehicles()[0], 5), std::invalid_argument);
}

TEST(Profiles, LargestRemainderSplit) {
  const auto p = assign_profiles(50, {0.6, 0.2, 0.2});
  ASSERT_EQ(p.size(), 50u);
  EXPECT_EQ(std::count(p.begin(), p.end(), BehaviorProfile::ForgerUnregistered), 30);
  EXPECT_EQ(std::count(p.begin(), p.end(), BehaviorProfile::ForgerImplausible), 10);
  EXPECT_EQ(std::count(p.begin(), p.end(), BehaviorProfile::ForgerReplay), 10);
  const auto q = assign_profiles(5, {1, 1, 1});
  EXPECT_EQ(q.size(), 5u);
  EXPECT_THROW(assign_profiles(5, {0, 0, 0}), ConfigInvalid);
}

TEST(StatusRecordCodec, RoundTripBinaryAndJson) {
  World w(small_config(20, 5));
  w.set_prior_vri(3, 0.4375);
  w.advance(1.0);
  for (const auto& e : emit_records(w, 1)) {
    const Bytes b = e.record.canonical_bytes();
    EXPECT_EQ(StatusRecord::decode(b), e.record);
    nlohmann::json j = e.record;
    EXPECT_EQ(j.get<StatusRecord>(), e.record);
  }
  Bytes b = emit_records(w, 1).front().record.canonical_bytes();
  b.push_back(0);
  EXPECT_THROW(StatusRecord::decode(b), DecodeError);
}

TEST(StatusRecordCodec, SignatureCoversEveryField) {
  World w(small_config(2));
  w.advance(1.0);
  StatusRecord r = emit_records(w, 1).front().record;
  ASSERT_TRUE(r.verify_signature());
  auto tweak = [&](auto f) {
    StatusRecord x = r;
    f(x);
    return x.verify_signature();
  };
  EXPECT_FALSE(tweak([](StatusRecord& x) { x.timestamp += 1; }));
  EXPECT_FALSE(tweak([](StatusRecord& x) { x.state.velocity += 0.01; }));
  EXPECT_FALSE(tweak([](StatusRecord& x) { x.state.position.y += 0.01; }));
  EXPECT_FALSE(tweak([](StatusRecord& x) { x.state.neighbor_count += 1; }));
  EXPECT_FALSE(tweak([](StatusRecord& x) { x.actions.turn = !x.actions.turn; }));
  EXPECT_FALSE(tweak([](StatusRecord& x) { x.prior_vri = 0.5; }));
}
