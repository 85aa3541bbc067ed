#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "best/assessment.hpp"
#include "best/system.hpp"

using namespace best;

namespace {

VehicleState state(double v, double a, double d, std::uint32_t count) {
  VehicleState s;
  s.velocity = v;
  s.acceleration = a;
  s.min_distance = d;
  s.neighbor_count = count;
  return s;
}

LabeledSequence random_sequence(Rng& rng, std::size_t length) {
  LabeledSequence s;
  s.length = length;
  for (std::size_t t = kWindow - length; t < kWindow; ++t)
    for (std::size_t k = 0; k < kFeatureCount; ++k) s.features(t, k) = rng.uniform();
  s.label = static_cast<RiskLevel>(rng.below(4));
  return s;
}

const SimulationResult& small_run(StoreKind store) {
  static std::map<StoreKind, SimulationResult> cache;
  auto it = cache.find(store);
  if (it == cache.end()) {
    SimulationConfig c;
    c.world.seed = 8;
    c.world.cav_count = 60;
    c.world.malicious_count = 10;
    c.duration_s = 12;
    c.store = store;
    c.keep_event_log = false;
    it = cache.emplace(store, run_simulation(c)).first;
  }
  return it->second;
}

double relative_error(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-6});
  return std::abs(a - b) / scale;
}

void gradient_check(const ModelParams& p, const std::vector<LabeledSequence>& toy) {
  auto [loss, grads] = loss_and_gradients(p, toy);
  ASSERT_TRUE(std::isfinite(loss));
  constexpr double eps = 1e-5;
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t k = 0; k < p.tensors.size(); ++k) {
    for (Eigen::Index i = 0; i < p.tensors[k].size(); ++i) {
      ModelParams q = p;
      q.tensors[k](i) += eps;
      const double up = loss_and_gradients(q, toy).first;
      q.tensors[k](i) -= 2 * eps;
      const double down = loss_and_gradients(q, toy).first;
      const double numeric = (up - down) / (2 * eps);
      const double err = relative_error(grads[k](i), numeric);
      worst = std::max(worst, err);
      ++checked;
      ASSERT_LT(err, 1e-4) << "tensor " << k << " index " << i << " analytic " << grads[k](i) << " numeric " << numeric;
    }
  }
  EXPECT_GT(checked, 0u);
  ::testing::Test::RecordProperty("worst_relative_error", std::to_string(worst));
}

}  // namespace

TEST(Features, NormalizedAndClamped) {
  const KinematicLimits lim;
  StatusRecord r;
  r.state = state(lim.v_max / 2, -lim.a_max, 25.0, 5);
  r.actions.brake = true;
  FeatureRow f = feature_row(r, lim);
  EXPECT_DOUBLE_EQ(f[0], 0.5);
  EXPECT_DOUBLE_EQ(f[1], 0.0);
  EXPECT_DOUBLE_EQ(f[2], 0.25);
  EXPECT_DOUBLE_EQ(f[3], 0.75);
  EXPECT_EQ(f[4], 1.0);
  EXPECT_EQ(f[5], 0.0);
  EXPECT_EQ(f[6], 0.0);
  r.state = state(3 * lim.v_max, 40.0, 1e9, 90);
  r.prior_vri = 0.7;
  f = feature_row(r, lim);
  EXPECT_EQ(f[0], 1.0);
  EXPECT_EQ(f[1], 1.0);
  EXPECT_EQ(f[2], 1.0);
  EXPECT_EQ(f[3], 0.0);
  EXPECT_EQ(f[6], 0.7);
}

TEST(GroundTruth, WorkedExamples) {
  const KinematicLimits lim;
  // 0.3*1 + 0 + 0 + 0 = 0.3
  const VehicleState cruising = state(lim.v_max, 0.0, 200.0, 0);
  EXPECT_NEAR(risk_score(std::vector{cruising}, lim), 0.3, 1e-12);
  EXPECT_EQ(ground_truth_vri(std::vector{cruising}, lim), RiskLevel::Medium);
  const VehicleState parked = state(0.0, 0.0, 100.0, 0);
  EXPECT_EQ(ground_truth_vri(std::vector{parked}, lim), RiskLevel::Low);
  const VehicleState crowded = state(lim.v_max, lim.a_max, 0.0, 20);
  EXPECT_NEAR(risk_score(std::vector{crowded}, lim), 1.0, 1e-12);
  EXPECT_EQ(ground_truth_vri(std::vector{crowded}, lim), RiskLevel::Accident);
  // Mean over steps: (0 + 1) / 2
  EXPECT_NEAR(risk_score(std::vector{parked, crowded}, lim), 0.5, 1e-12);
  EXPECT_EQ(ground_truth_vri(std::vector{parked, crowded}, lim), RiskLevel::High);
}

TEST(GroundTruth, CutPointsBelongToTheUpperClass) {
  EXPECT_EQ(level_for_score(0.0), RiskLevel::Low);
  EXPECT_EQ(level_for_score(std::nextafter(0.25, 0.0)), RiskLevel::Low);
  EXPECT_EQ(level_for_score(0.25), RiskLevel::Medium);
  EXPECT_EQ(level_for_score(0.5), RiskLevel::High);
  EXPECT_EQ(level_for_score(0.75), RiskLevel::Accident);
  EXPECT_EQ(level_for_score(7.0), RiskLevel::Accident);
}

TEST(GroundTruth, RejectsEmptyAndLongSequences) {
  EXPECT_THROW(ground_truth_vri(std::vector<VehicleState>{}), EmptySequence);
  EXPECT_THROW(ground_truth_vri(std::vector<VehicleState>(11)), std::invalid_argument);
  EXPECT_NO_THROW(ground_truth_vri(std::vector<VehicleState>(10, state(1, 0, 50, 1))));
}

TEST(GroundTruth, MonotoneInEveryRiskFactor) {
  const KinematicLimits lim;
  const double vs[] = {0, 3, 7, 11, lim.v_max};
  const double as[] = {0, 2.5, 5, 7.5, 10};
  const double ds[] = {120, 90, 50, 10, 0};  // closer is riskier
  const std::uint32_t cs[] = {0, 3, 8, 15, 25};
  auto level = [&](int i, int j, int k, int l) {
    return static_cast<int>(ground_truth_vri(std::vector{state(vs[i], as[j], ds[k], cs[l])}, lim));
  };
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j)
      for (int k = 0; k < 5; ++k)
        for (int l = 0; l < 5; ++l) {
          if (i < 4) {
            EXPECT_LE(level(i, j, k, l), level(i + 1, j, k, l));
          }
          if (j < 4) {
            EXPECT_LE(level(i, j, k, l), level(i, j + 1, k, l));
          }
          if (k < 4) {
            EXPECT_LE(level(i, j, k, l), level(i, j, k + 1, l));
          }
          if (l < 4) {
            EXPECT_LE(level(i, j, k, l), level(i, j, k, l + 1));
          }
        }
  // Braking counts like accelerating.
  EXPECT_EQ(level(2, 3, 2, 2), static_cast<int>(ground_truth_vri(std::vector{state(vs[2], -as[3], ds[2], cs[2])}, lim)));
}

TEST(Dataset, OneWindowPerVehicleTimestamp) {
  const auto& run = small_run(StoreKind::Blockchain);
  const auto data = prepare_dataset(run.store);
  EXPECT_EQ(data.size(), run.store.record_count());
  for (const auto& q : data) {
    EXPECT_GE(q.length, 1u);
    EXPECT_LE(q.length, kWindow);
    EXPECT_EQ(q.length, std::min<std::size_t>(kWindow, static_cast<std::size_t>(q.terminal_ts)));
    for (std::size_t t = 0; t + q.length < kWindow; ++t) EXPECT_EQ(q.features.row(static_cast<Eigen::Index>(t)).norm(), 0.0);
    EXPECT_FALSE(run.malicious_keys.count(q.vehicle));
  }
}

TEST(Dataset, LabelsMatchStoredHistory) {
  const auto& run = small_run(StoreKind::Central);
  const auto data = prepare_dataset(run.store);
  std::size_t forged = 0;
  for (const auto& q : data) {
    forged += run.malicious_keys.count(q.vehicle);
    // Oracle: recompute from the raw stored records ending at terminal_ts.
    std::vector<VehicleState> states;
    const auto& refs = run.store.index().at(q.vehicle);
    for (const auto& ref : refs) {
      const auto& r = run.store.record(ref);
      states.push_back(r.state);
      if (r.timestamp == q.terminal_ts) break;
    }
    if (states.size() > kWindow) states.erase(states.begin(), states.end() - kWindow);
    EXPECT_EQ(q.label, ground_truth_vri(states, run.store.params().limits));
    EXPECT_EQ(q.length, states.size());
  }
  EXPECT_GT(forged, 0u);
}

TEST(Dataset, SplitIsByVehicleAndSeeded) {
  const auto data = prepare_dataset(small_run(StoreKind::Blockchain).store);
  const auto a = split_dataset(data, 4), b = split_dataset(data, 4), c = split_dataset(data, 5);
  EXPECT_EQ(a.train.size(), b.train.size());
  EXPECT_EQ(a.test.size() + a.train.size(), data.size());
  std::set<PublicKey> train_keys, test_keys;
  for (const auto& q : a.train) train_keys.insert(q.vehicle);
  for (const auto& q : a.test) test_keys.insert(q.vehicle);
  for (const auto& k : test_keys) EXPECT_FALSE(train_keys.count(k));
  EXPECT_GT(a.test.size(), 0u);
  std::set<PublicKey> other_keys;
  for (const auto& q : c.test) other_keys.insert(q.vehicle);
  EXPECT_NE(test_keys, other_keys);
  // Fraction over many keys.
  std::size_t hits = 0;
  for (std::uint64_t i = 0; i < 10000; ++i) hits += in_test_split(rsu_identity(i, 0).identity.public_key, 1, 0.2);
  EXPECT_NEAR(hits / 10000.0, 0.2, 0.02);
}

TEST(Dataset, CsvRoundTrip) {
  Rng rng(3);
  std::vector<LabeledSequence> data;
  for (std::size_t n = 1; n <= 10; ++n) data.push_back(random_sequence(rng, n));
  std::stringstream ss;
  write_dataset_csv(ss, data);
  const auto back = read_dataset_csv(ss);
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(back[i].features, data[i].features);
    EXPECT_EQ(back[i].label, data[i].label);
    EXPECT_EQ(back[i].length, data[i].length);
  }
  std::stringstream bad("h\n1,2,3\n");
  EXPECT_THROW(read_dataset_csv(bad), DecodeError);
}

TEST(Softmax, NormalizedAndPositive) {
  Rng rng(5);
  for (int trial = 0; trial < 2000; ++trial) {
    Eigen::MatrixXd logits(4, 3);
    const double scale = trial % 3 == 0 ? 1000.0 : 5.0;
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits(i) = rng.uniform(-scale, scale);
    const Eigen::MatrixXd p = detail::softmax(logits);
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      EXPECT_NEAR(p.col(j).sum(), 1.0, 1e-9);
      EXPECT_GT(p.col(j).minCoeff(), 0.0);
    }
  }
}

TEST(Models, ForwardGivesDistributions) {
  Rng rng(6);
  for (auto arch : {Architecture::Lstm2, Architecture::Dnn4}) {
    const ModelParams p = init_model(arch, 32, 0.2, 9);
    for (std::size_t n = 1; n <= 10; ++n) {
      const auto seq = random_sequence(rng, n);
      const Eigen::Vector4d infer = forward(p, seq, Mode::Infer);
      const Eigen::Vector4d train = forward(p, seq, Mode::Train);
      EXPECT_NEAR(infer.sum(), 1.0, 1e-9);
      EXPECT_NEAR(train.sum(), 1.0, 1e-9);
      EXPECT_GT(infer.minCoeff(), 0.0);
      EXPECT_EQ(train, forward(p, seq, Mode::Train));
      const double vri = vri_from_probabilities(infer);
      EXPECT_GT(vri, 0.0);
      EXPECT_LE(vri, 1.0);
    }
  }
}

TEST(Models, PaddingRowsAreIgnoredByLstm) {
  Rng rng(2);
  const ModelParams p = init_model(Architecture::Lstm2, 16, 0.0, 3);
  LabeledSequence s = random_sequence(rng, 4);
  const Eigen::Vector4d a = forward(p, s);
  for (std::size_t t = 0; t < 6; ++t) s.features.row(static_cast<Eigen::Index>(t)).setConstant(0.9);
  EXPECT_TRUE(a.isApprox(forward(p, s), 1e-14));
}

TEST(Models, ShapeMismatchDetected) {
  ModelParams p = init_model(Architecture::Lstm2, 8, 0.2, 1);
  p.tensors[2].resize(3, 3);
  Rng rng(1);
  EXPECT_THROW(forward(p, random_sequence(rng, 3)), ShapeMismatch);
  ModelParams q = init_model(Architecture::Dnn4, 8, 0.2, 1);
  q.tensors.pop_back();
  EXPECT_THROW(check_shapes(q), ShapeMismatch);
}

TEST(Gradients, LstmMatchesFiniteDifferences) {
  Rng rng(17);
  std::vector<LabeledSequence> toy{random_sequence(rng, 10), random_sequence(rng, 6), random_sequence(rng, 2)};
  gradient_check(init_model(Architecture::Lstm2, 8, 0.0, 4), toy);
}

TEST(Gradients, DnnMatchesFiniteDifferences) {
  Rng rng(18);
  std::vector<LabeledSequence> toy{random_sequence(rng, 10), random_sequence(rng, 7), random_sequence(rng, 3)};
  gradient_check(init_model(Architecture::Dnn4, 32, 0.0, 4), toy);
}

TEST(Training, SeparableToyProblemConverges) {
  // Class = bucket of the mean of feature 0.
  Rng rng(23);
  std::vector<LabeledSequence> data;
  for (int i = 0; i < 400; ++i) {
    LabeledSequence s;
    s.length = 3 + rng.below(8);
    const auto cls = rng.below(4);
    for (std::size_t t = kWindow - s.length; t < kWindow; ++t) {
      s.features(static_cast<Eigen::Index>(t), 0) = 0.125 + 0.25 * static_cast<double>(cls) + rng.uniform(-0.05, 0.05);
      s.features(static_cast<Eigen::Index>(t), 1) = rng.uniform();
    }
    s.label = static_cast<RiskLevel>(cls);
    data.push_back(s);
  }
  for (auto arch : {Architecture::Lstm2, Architecture::Dnn4}) {
    TrainConfig tc;
    tc.epochs = 40;
    tc.lr = 1e-2;
    const auto res = train(init_model(arch, 16, 0.0, 2), data, tc);
    ASSERT_EQ(res.loss_trace.size(), 40u);
    EXPECT_LT(res.loss_trace.back(), 0.05) << to_string(arch);
    EXPECT_LT(res.loss_trace.back(), res.loss_trace.front());
    EXPECT_GT(evaluate(res.params, data).accuracy, 0.99);
  }
}

TEST(Training, DeterministicUnderSeed) {
  Rng rng(30);
  std::vector<LabeledSequence> data;
  for (int i = 0; i < 64; ++i) data.push_back(random_sequence(rng, 1 + rng.below(10)));
  TrainConfig tc;
  tc.epochs = 3;
  const auto a = train(init_model(Architecture::Lstm2, 8, 0.2, 1), data, tc);
  const auto b = train(init_model(Architecture::Lstm2, 8, 0.2, 1), data, tc);
  EXPECT_EQ(a.loss_trace, b.loss_trace);
  EXPECT_EQ(serialize_model(a.params), serialize_model(b.params));
}

TEST(Training, DivergenceIsReported) {
  Rng rng(31);
  std::vector<LabeledSequence> data;
  for (int i = 0; i < 64; ++i) data.push_back(random_sequence(rng, 5));
  TrainConfig tc;
  tc.epochs = 3;
  tc.lr = std::numeric_limits<double>::infinity();
  EXPECT_THROW(train(init_model(Architecture::Dnn4, 8, 0.0, 1), data, tc), DivergenceDetected);
  EXPECT_THROW(train(init_model(Architecture::Dnn4, 8, 0.0, 1), {}, {}), std::invalid_argument);
}

TEST(Evaluation, ConfusionMatrixMatchesPerSequenceOracle) {
  Rng rng(40);
  std::vector<LabeledSequence> test;
  for (int i = 0; i < 300; ++i) test.push_back(random_sequence(rng, 1 + rng.below(10)));
  const ModelParams p = init_model(Architecture::Lstm2, 16, 0.2, 7);
  const Evaluation e = evaluate(p, test);
  ConfusionMatrix oracle{};
  std::size_t correct = 0;
  for (const auto& q : test) {
    const Eigen::Vector4d probs = forward(p, q);
    std::size_t best = 0;
    for (std::size_t k = 1; k < 4; ++k)
      if (probs(static_cast<Eigen::Index>(k)) > probs(static_cast<Eigen::Index>(best))) best = k;
    oracle[static_cast<std::size_t>(q.label)][best] += 1;
    correct += best == static_cast<std::size_t>(q.label);
  }
  EXPECT_EQ(e.confusion, oracle);
  EXPECT_DOUBLE_EQ(e.accuracy, static_cast<double>(correct) / 300.0);
}

TEST(Evaluation, ConstantPredictorScoresClassFrequency) {
  ModelParams p = init_model(Architecture::Dnn4, 8, 0.0, 1);
  for (auto& t : p.tensors) t.setZero();
  p.tensors.back()(2) = 1.0;  // always "high"
  Rng rng(41);
  std::vector<LabeledSequence> test;
  std::size_t highs = 0;
  for (int i = 0; i < 500; ++i) {
    test.push_back(random_sequence(rng, 4));
    highs += test.back().label == RiskLevel::High;
  }
  const Evaluation e = evaluate(p, test);
  EXPECT_DOUBLE_EQ(e.accuracy, static_cast<double>(highs) / 500.0);
  // Uniform random labels: frequency of one class is Binomial(500, 1/4).
  EXPECT_NEAR(e.accuracy, 0.25, 4 * std::sqrt(0.25 * 0.75 / 500));
}

TEST(Vri, ClassCentersAndClamp) {
  for (std::size_t k = 0; k < 4; ++k) {
    Eigen::Vector4d p = Eigen::Vector4d::Zero();
    p(static_cast<Eigen::Index>(k)) = 1.0;
    EXPECT_DOUBLE_EQ(vri_from_probabilities(p), kClassCenters[k]);
  }
  EXPECT_EQ(vri_from_probabilities(Eigen::Vector4d::Zero()), kVriFloor);
  EXPECT_DOUBLE_EQ(vri_from_probabilities(Eigen::Vector4d::Constant(0.25)), 0.5);
}

TEST(Countermeasures, ExactPartitionAtBoundaries) {
  const Thresholds th{0.4, 0.8};
  EXPECT_EQ(countermeasure_for(kVriFloor, th), Countermeasure::None);
  EXPECT_EQ(countermeasure_for(0.4, th), Countermeasure::None);
  EXPECT_EQ(countermeasure_for(std::nextafter(0.4, 1.0), th), Countermeasure::Warning);
  EXPECT_EQ(countermeasure_for(0.8, th), Countermeasure::Warning);
  EXPECT_EQ(countermeasure_for(std::nextafter(0.8, 1.0), th), Countermeasure::Suspension);
  EXPECT_EQ(countermeasure_for(1.0, th), Countermeasure::Suspension);
  EXPECT_THROW((Thresholds{0.5, 0.5}.validate()), ConfigInvalid);
  EXPECT_THROW((Thresholds{0.0, 0.5}.validate()), ConfigInvalid);
  EXPECT_THROW((Thresholds{0.3, 1.0}.validate()), ConfigInvalid);
}

TEST(Assess, ReportsEchoLatestRecord) {
  const auto& run = small_run(StoreKind::Blockchain);
  const ModelParams p = init_model(Architecture::Lstm2, 16, 0.2, 3);
  std::size_t n = 0;
  for (const auto& [key, refs] : run.store.index()) {
    const Assessment a = assess(p, run.store, key);
    EXPECT_EQ(a.report.vehicle, key);
    EXPECT_EQ(a.report.signature, run.store.record(refs.back()).signature);
    EXPECT_GT(a.report.vri, 0.0);
    EXPECT_LE(a.report.vri, 1.0);
    EXPECT_EQ(a.countermeasure, countermeasure_for(a.report.vri, {}));
    if (++n == 10) break;
  }
  const KeyPair stranger = generate_identity(999, IdentityKind::Vehicle);
  EXPECT_THROW(assess(p, run.store, stranger.identity.public_key), UnknownVehicle);
}

TEST(ModelFile, RoundTripAndCorruption) {
  for (auto arch : {Architecture::Lstm2, Architecture::Dnn4}) {
    const ModelParams p = init_model(arch, 12, 0.2, 77);
    const Bytes b = serialize_model(p);
    const ModelParams q = deserialize_model(b);
    EXPECT_EQ(serialize_model(q), b);
    EXPECT_EQ(q.tensors, p.tensors);
    Bytes bad = b;
    bad[0] = 'X';
    EXPECT_THROW(deserialize_model(bad), DecodeError);
    Bytes cut(b.begin(), b.end() - 3);
    EXPECT_THROW(deserialize_model(cut), DecodeError);
    Bytes extra = b;
    extra.push_back(0);
    EXPECT_THROW(deserialize_model(extra), DecodeError);
  }
}
