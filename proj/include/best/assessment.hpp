#pragma once

// Risk assessment: features and ground-truth labels from stored records,
// a two-layer LSTM and a four-layer feed-forward classifier with hand-written
// backpropagation, Adam training, evaluation, and the VRI / countermeasure
// mapping.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cfloat>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "best/crypto.hpp"
#include "best/ledger.hpp"
#include "best/rng.hpp"
#include "best/telemetry.hpp"

namespace best {

inline constexpr std::size_t kWindow = 10;
inline constexpr std::size_t kFeatureCount = 7;
inline constexpr std::size_t kClasses = 4;

enum class RiskLevel : std::uint8_t { Low = 0, Medium = 1, High = 2, Accident = 3 };

inline const char* to_string(RiskLevel l) {
  static constexpr const char* kNames[] = {"low", "medium", "high", "accident"};
  return kNames[static_cast<std::size_t>(l)];
}

// ---------------------------------------------------------------------------
// Features and labels

inline constexpr double kCountCap = 20.0;
inline constexpr double kDistanceCap = 100.0;

using FeatureRow = std::array<double, kFeatureCount>;

inline double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

// velocity, acceleration, neighbour count, proximity, brake, turn, prior VRI.
inline FeatureRow feature_row(const StatusRecord& r, const KinematicLimits& lim) {
  const auto& s = r.state;
  return {clamp01(s.velocity / lim.v_max),
          clamp01((s.acceleration + lim.a_max) / (2 * lim.a_max)),
          clamp01(s.neighbor_count / kCountCap),
          clamp01(1.0 - std::min(s.min_distance, kDistanceCap) / kDistanceCap),
          r.actions.brake ? 1.0 : 0.0,
          r.actions.turn ? 1.0 : 0.0,
          clamp01(r.prior_vri.value_or(0.0))};
}

// Mean over steps of 0.3 v/v_max + 0.2 |a|/a_max + 0.3 (1 - min(d,100)/100)
// + 0.2 min(count,20)/20, on the states as reported (no clamping of v or a).
inline double risk_score(std::span<const VehicleState> states, const KinematicLimits& lim) {
  if (states.empty()) throw EmptySequence("ground truth needs at least one state");
  if (states.size() > kWindow) throw std::invalid_argument("ground truth takes at most 10 states");
  double sum = 0.0;
  for (const auto& s : states) {
    sum += 0.3 * (s.velocity / lim.v_max) + 0.2 * (std::abs(s.acceleration) / lim.a_max) +
           0.3 * (1.0 - std::min(s.min_distance, kDistanceCap) / kDistanceCap) +
           0.2 * std::min<double>(s.neighbor_count, kCountCap) / kCountCap;
  }
  return sum / static_cast<double>(states.size());
}

inline RiskLevel level_for_score(double r) {
  if (r < 0.25) return RiskLevel::Low;
  if (r < 0.5) return RiskLevel::Medium;
  if (r < 0.75) return RiskLevel::High;
  return RiskLevel::Accident;
}

inline RiskLevel ground_truth_vri(std::span<const VehicleState> states, const KinematicLimits& lim = {}) {
  return level_for_score(risk_score(states, lim));
}

using SequenceMatrix = Eigen::Matrix<double, kWindow, kFeatureCount, Eigen::RowMajor>;

// Rows are oldest first; shorter histories occupy the last `length` rows and
// the rows before them are zero padding.
struct LabeledSequence {
  SequenceMatrix features = SequenceMatrix::Zero();
  std::size_t length = 0;
  RiskLevel label = RiskLevel::Low;
  PublicKey vehicle;
  std::int64_t terminal_ts = 0;

  bool valid_row(std::size_t t) const { return t + length >= kWindow; }
};

inline LabeledSequence make_sequence(std::span<const StatusRecord> records, const KinematicLimits& lim) {
  if (records.empty()) throw EmptySequence("sequence needs at least one record");
  if (records.size() > kWindow) records = records.last(kWindow);
  LabeledSequence s;
  s.length = records.size();
  s.vehicle = records.back().vehicle;
  s.terminal_ts = records.back().timestamp;
  std::vector<VehicleState> states;
  const std::size_t pad = kWindow - s.length;
  for (std::size_t i = 0; i < s.length; ++i) {
    const FeatureRow f = feature_row(records[i], lim);
    for (std::size_t k = 0; k < kFeatureCount; ++k) s.features(pad + i, k) = f[k];
    states.push_back(records[i].state);
  }
  s.label = ground_truth_vri(states, lim);
  return s;
}

// One sequence per (vehicle, terminal timestamp): a sliding window of stride
// one over each vehicle's stored history. When a timestamp repeats (replayed
// records in a store that lets them in) only its first occurrence ends a
// window.
inline std::vector<LabeledSequence> prepare_dataset(const Chain& store, std::size_t window = kWindow) {
  if (window < 1 || window > kWindow) throw std::invalid_argument("prepare_dataset: window must be in [1, 10]");
  const KinematicLimits& lim = store.params().limits;
  std::vector<LabeledSequence> out;
  for (const auto& [key, refs] : store.index()) {
    std::vector<StatusRecord> history;
    std::set<std::int64_t> seen;
    for (const auto& ref : refs) {
      history.push_back(store.record(ref));
      if (!seen.insert(history.back().timestamp).second) continue;
      const std::size_t n = std::min(window, history.size());
      out.push_back(make_sequence(std::span<const StatusRecord>(history).last(n), lim));
    }
  }
  return out;
}

struct DatasetSplit {
  std::vector<LabeledSequence> train;
  std::vector<LabeledSequence> test;
};

// Vehicle-level split: a seeded hash of the vehicle key sends about
// `test_fraction` of vehicles (with all their windows) to the test side.
// A vehicle lands on the same side in every store built from the same world.
inline bool in_test_split(const PublicKey& vehicle, std::uint64_t seed, double test_fraction) {
  ByteWriter w;
  w.u64(seed);
  w.fixed(vehicle);
  const Digest d = digest(w.data());
  std::uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x = (x << 8) | d.bytes[i];
  return static_cast<double>(x >> 11) * 0x1.0p-53 < test_fraction;
}

inline DatasetSplit split_dataset(const std::vector<LabeledSequence>& all, std::uint64_t seed,
                                  double test_fraction = 0.2) {
  DatasetSplit s;
  for (const auto& q : all) (in_test_split(q.vehicle, seed, test_fraction) ? s.test : s.train).push_back(q);
  Rng rng(derive_seed(seed, 0x5EED));
  rng.shuffle(s.train);
  return s;
}

inline std::vector<LabeledSequence> without_vehicles(const std::vector<LabeledSequence>& all,
                                                     const std::set<PublicKey>& excluded) {
  std::vector<LabeledSequence> out;
  for (const auto& q : all)
    if (!excluded.count(q.vehicle)) out.push_back(q);
  return out;
}

inline void write_dataset_csv(std::ostream& os, const std::vector<LabeledSequence>& data) {
  os << "vehicle,terminal_ts,length,label";
  for (std::size_t t = 0; t < kWindow; ++t)
    for (std::size_t k = 0; k < kFeatureCount; ++k) os << ",f" << t << '_' << k;
  os << '\n';
  char buf[32];
  for (const auto& q : data) {
    os << q.vehicle.hex() << ',' << q.terminal_ts << ',' << q.length << ',' << static_cast<int>(q.label);
    for (std::size_t t = 0; t < kWindow; ++t)
      for (std::size_t k = 0; k < kFeatureCount; ++k) {
        std::snprintf(buf, sizeof buf, "%.17g", q.features(t, k));
        os << ',' << buf;
      }
    os << '\n';
  }
}

inline std::vector<LabeledSequence> read_dataset_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw DecodeError("dataset CSV is empty");
  std::vector<LabeledSequence> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (cells.size() != 4 + kWindow * kFeatureCount)
      throw DecodeError("dataset line " + std::to_string(lineno) + ": wrong column count");
    try {
      LabeledSequence q;
      q.vehicle = PublicKey::from_hex(cells[0]);
      q.terminal_ts = std::stoll(cells[1]);
      q.length = std::stoul(cells[2]);
      const int label = std::stoi(cells[3]);
      if (label < 0 || label > 3 || q.length < 1 || q.length > kWindow) throw std::out_of_range("range");
      q.label = static_cast<RiskLevel>(label);
      for (std::size_t t = 0; t < kWindow; ++t)
        for (std::size_t k = 0; k < kFeatureCount; ++k) q.features(t, k) = std::stod(cells[4 + t * kFeatureCount + k]);
      out.push_back(q);
    } catch (const std::logic_error&) {
      throw DecodeError("dataset line " + std::to_string(lineno) + ": bad value");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Models

enum class Architecture : std::uint8_t { Lstm2 = 0, Dnn4 = 1 };

inline const char* to_string(Architecture a) { return a == Architecture::Lstm2 ? "lstm" : "dnn"; }

inline constexpr std::array<std::size_t, 4> kDnnWidths = {64, 64, 32, kClasses};

// Tensor order. Lstm2: W1 (4H x (7+H)), b1, W2 (4H x 2H), b2, Wo (4 x H), bo.
// Gate blocks within W and b are i, f, g, o. Dnn4: W1 (64 x 70), b1,
// W2 (64 x 64), b2, W3 (32 x 64), b3, W4 (4 x 32), b4.
struct ModelParams {
  Architecture arch = Architecture::Lstm2;
  std::size_t hidden = 32;
  double dropout = 0.2;
  std::uint64_t seed = 0;
  std::vector<Eigen::MatrixXd> tensors;
};

inline std::vector<std::pair<Eigen::Index, Eigen::Index>> expected_shapes(Architecture arch, std::size_t hidden) {
  const auto H = static_cast<Eigen::Index>(hidden);
  const auto F = static_cast<Eigen::Index>(kFeatureCount);
  const auto C = static_cast<Eigen::Index>(kClasses);
  if (arch == Architecture::Lstm2) return {{4 * H, F + H}, {4 * H, 1}, {4 * H, 2 * H}, {4 * H, 1}, {C, H}, {C, 1}};
  std::vector<std::pair<Eigen::Index, Eigen::Index>> s;
  Eigen::Index in = static_cast<Eigen::Index>(kWindow * kFeatureCount);
  for (auto w : kDnnWidths) {
    s.push_back({static_cast<Eigen::Index>(w), in});
    s.push_back({static_cast<Eigen::Index>(w), 1});
    in = static_cast<Eigen::Index>(w);
  }
  return s;
}

inline void check_shapes(const ModelParams& p) {
  if (p.arch == Architecture::Lstm2 && p.hidden == 0) throw ShapeMismatch("hidden width must be positive");
  if (!(p.dropout >= 0.0 && p.dropout < 1.0)) throw ShapeMismatch("dropout must be in [0, 1)");
  const auto shapes = expected_shapes(p.arch, p.hidden);
  if (p.tensors.size() != shapes.size()) throw ShapeMismatch("wrong number of parameter tensors");
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (p.tensors[i].rows() != shapes[i].first || p.tensors[i].cols() != shapes[i].second)
      throw ShapeMismatch("tensor " + std::to_string(i) + " has shape " + std::to_string(p.tensors[i].rows()) + "x" +
                          std::to_string(p.tensors[i].cols()) + ", expected " + std::to_string(shapes[i].first) +
                          "x" + std::to_string(shapes[i].second));
    if (!p.tensors[i].allFinite()) throw ShapeMismatch("tensor " + std::to_string(i) + " is not finite");
  }
}

// Weights and biases uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], where
// fan_in is the column count of the layer's weight matrix.
inline ModelParams init_model(Architecture arch, std::size_t hidden, double dropout, std::uint64_t seed) {
  ModelParams p;
  p.arch = arch;
  p.hidden = hidden;
  p.dropout = dropout;
  p.seed = seed;
  Rng rng(derive_seed(seed, 0x1417));
  const auto shapes = expected_shapes(arch, hidden);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const double fan_in = static_cast<double>(shapes[i - i % 2].second);
    const double bound = 1.0 / std::sqrt(fan_in);
    Eigen::MatrixXd m(shapes[i].first, shapes[i].second);
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = rng.uniform(-bound, bound);
    p.tensors.push_back(std::move(m));
  }
  check_shapes(p);
  return p;
}

inline ModelParams zero_like(const ModelParams& p) {
  ModelParams z = p;
  for (auto& t : z.tensors) t.setZero();
  return z;
}

// ---------------------------------------------------------------------------
// Batched forward / backward

namespace detail {

using Mat = Eigen::MatrixXd;

struct Batch {
  std::array<Mat, kWindow> x;  // kFeatureCount x B per step
  Mat mask;                    // kWindow x B, 1 for real rows
  std::vector<std::size_t> labels;
  Eigen::Index size = 0;
};

inline Batch make_batch(std::span<const LabeledSequence* const> seqs) {
  Batch b;
  b.size = static_cast<Eigen::Index>(seqs.size());
  for (auto& x : b.x) x.setZero(kFeatureCount, b.size);
  b.mask.setZero(kWindow, b.size);
  for (Eigen::Index j = 0; j < b.size; ++j) {
    const LabeledSequence& s = *seqs[static_cast<std::size_t>(j)];
    for (std::size_t t = 0; t < kWindow; ++t) {
      b.x[t].col(j) = s.features.row(static_cast<Eigen::Index>(t)).transpose();
      b.mask(static_cast<Eigen::Index>(t), j) = s.valid_row(t) ? 1.0 : 0.0;
    }
    b.labels.push_back(static_cast<std::size_t>(s.label));
  }
  return b;
}

// Dropout masks already scaled by 1/(1-p); empty means no dropout.
struct DropoutMasks {
  std::vector<Mat> masks;
};

inline Mat bernoulli_mask(Rng& rng, Eigen::Index rows, Eigen::Index cols, double p) {
  Mat m(rows, cols);
  const double keep = 1.0 / (1.0 - p);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.uniform() < p ? 0.0 : keep;
  return m;
}

// Variational masks: one per sample, reused at every time step.
inline DropoutMasks draw_masks(const ModelParams& p, Eigen::Index batch, Rng& rng) {
  DropoutMasks d;
  if (p.dropout <= 0.0) return d;
  if (p.arch == Architecture::Lstm2) {
    const auto H = static_cast<Eigen::Index>(p.hidden);
    d.masks.push_back(bernoulli_mask(rng, H, batch, p.dropout));
    d.masks.push_back(bernoulli_mask(rng, H, batch, p.dropout));
  } else {
    for (std::size_t l = 0; l + 1 < kDnnWidths.size(); ++l)
      d.masks.push_back(bernoulli_mask(rng, static_cast<Eigen::Index>(kDnnWidths[l]), batch, p.dropout));
  }
  return d;
}

inline Mat sigmoid(const Mat& z) { return (1.0 + (-z.array()).exp()).inverse().matrix(); }

// Column-wise softmax; components floored at DBL_MIN so they stay positive.
inline Mat softmax(const Mat& logits) {
  Mat p(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const double mx = logits.col(j).maxCoeff();
    Eigen::VectorXd e = (logits.col(j).array() - mx).exp();
    p.col(j) = e / e.sum();
    for (Eigen::Index i = 0; i < p.rows(); ++i) p(i, j) = std::max(p(i, j), DBL_MIN);
  }
  return p;
}

struct LstmLayerCache {
  std::array<Mat, kWindow> concat, i, f, g, o, c_prev, tanh_c, h_out;
};

inline void lstm_layer_forward(const Mat& W, const Mat& b, const std::array<Mat, kWindow>& in, const Mat& mask,
                               std::size_t hidden, LstmLayerCache& cache) {
  const auto H = static_cast<Eigen::Index>(hidden);
  const Eigen::Index B = mask.cols();
  const Eigen::Index nin = in[0].rows();
  Mat h = Mat::Zero(H, B), c = Mat::Zero(H, B);
  for (std::size_t t = 0; t < kWindow; ++t) {
    Mat& cat = cache.concat[t];
    cat.resize(nin + H, B);
    cat.topRows(nin) = in[t];
    cat.bottomRows(H) = h;
    Mat z = W * cat;
    z.colwise() += b.col(0);
    cache.i[t] = sigmoid(z.topRows(H));
    cache.f[t] = sigmoid(z.middleRows(H, H));
    cache.g[t] = z.middleRows(2 * H, H).array().tanh().matrix();
    cache.o[t] = sigmoid(z.bottomRows(H));
    cache.c_prev[t] = c;
    Mat cn = (cache.f[t].array() * c.array() + cache.i[t].array() * cache.g[t].array()).matrix();
    cache.tanh_c[t] = cn.array().tanh().matrix();
    Mat hn = (cache.o[t].array() * cache.tanh_c[t].array()).matrix();
    for (Eigen::Index j = 0; j < B; ++j) {
      if (mask(static_cast<Eigen::Index>(t), j) > 0.0) {
        c.col(j) = cn.col(j);
        h.col(j) = hn.col(j);
      }
    }
    cache.h_out[t] = h;
  }
}

// dh_ext[t]: gradient arriving at the layer's output h_t from above.
// Accumulates into dW, db; writes input gradients to dx.
inline void lstm_layer_backward(const Mat& W, const LstmLayerCache& cache, const Mat& mask,
                                const std::array<Mat, kWindow>& dh_ext, std::size_t hidden, Mat& dW, Mat& db,
                                std::array<Mat, kWindow>* dx) {
  const auto H = static_cast<Eigen::Index>(hidden);
  const Eigen::Index B = mask.cols();
  const Eigen::Index nin = W.cols() - H;
  Mat dh_next = Mat::Zero(H, B), dc_next = Mat::Zero(H, B);
  Mat dz(4 * H, B);
  for (std::size_t tt = kWindow; tt-- > 0;) {
    const auto t = tt;
    Mat dh = dh_next;
    if (dh_ext[t].size()) dh += dh_ext[t];
    const auto& I = cache.i[t].array();
    const auto& F = cache.f[t].array();
    const auto& G = cache.g[t].array();
    const auto& O = cache.o[t].array();
    const auto& Tc = cache.tanh_c[t].array();
    Mat dct = (dc_next.array() + dh.array() * O * (1.0 - Tc * Tc)).matrix();
    dz.topRows(H) = (dct.array() * G * I * (1.0 - I)).matrix();
    dz.middleRows(H, H) = (dct.array() * cache.c_prev[t].array() * F * (1.0 - F)).matrix();
    dz.middleRows(2 * H, H) = (dct.array() * I * (1.0 - G * G)).matrix();
    dz.bottomRows(H) = (dh.array() * Tc * O * (1.0 - O)).matrix();
    const Eigen::RowVectorXd m = mask.row(static_cast<Eigen::Index>(t));
    dz.array().rowwise() *= m.array();
    dW.noalias() += dz * cache.concat[t].transpose();
    db.col(0) += dz.rowwise().sum();
    Mat dcat = W.transpose() * dz;
    if (dx) (*dx)[t] = dcat.topRows(nin);
    Mat dc_prev = (dct.array() * F).matrix();
    for (Eigen::Index j = 0; j < B; ++j) {
      if (m(j) > 0.0) {
        dh_next.col(j) = dcat.col(j).bottomRows(H);
        dc_next.col(j) = dc_prev.col(j);
      } else {
        dh_next.col(j) = dh.col(j);
      }
    }
  }
}

struct LossAndGrad {
  double loss = 0.0;
  Mat probs;
  std::vector<Mat> grads;
};

inline double cross_entropy(const Mat& probs, const std::vector<std::size_t>& labels) {
  double s = 0.0;
  for (std::size_t j = 0; j < labels.size(); ++j) s -= std::log(probs(static_cast<Eigen::Index>(labels[j]), static_cast<Eigen::Index>(j)));
  return s / static_cast<double>(labels.size());
}

inline Mat dlogits(const Mat& probs, const std::vector<std::size_t>& labels) {
  Mat d = probs;
  for (std::size_t j = 0; j < labels.size(); ++j) d(static_cast<Eigen::Index>(labels[j]), static_cast<Eigen::Index>(j)) -= 1.0;
  return d / static_cast<double>(labels.size());
}

inline LossAndGrad lstm_run(const ModelParams& p, const Batch& b, const DropoutMasks& dm, bool want_grad) {
  const auto& W1 = p.tensors[0];
  const auto& b1 = p.tensors[1];
  const auto& W2 = p.tensors[2];
  const auto& b2 = p.tensors[3];
  const auto& Wo = p.tensors[4];
  const auto& bo = p.tensors[5];
  const bool drop = !dm.masks.empty();
  LstmLayerCache c1, c2;
  lstm_layer_forward(W1, b1, b.x, b.mask, p.hidden, c1);
  std::array<Mat, kWindow> in2;
  for (std::size_t t = 0; t < kWindow; ++t)
    in2[t] = drop ? Mat((c1.h_out[t].array() * dm.masks[0].array()).matrix()) : c1.h_out[t];
  lstm_layer_forward(W2, b2, in2, b.mask, p.hidden, c2);
  Mat hT = c2.h_out[kWindow - 1];
  if (drop) hT = (hT.array() * dm.masks[1].array()).matrix();
  Mat logits = Wo * hT;
  logits.colwise() += bo.col(0);
  LossAndGrad out;
  out.probs = softmax(logits);
  if (b.labels.empty()) return out;
  out.loss = cross_entropy(out.probs, b.labels);
  if (!want_grad) return out;

  out.grads = zero_like(p).tensors;
  const Mat dl = dlogits(out.probs, b.labels);
  out.grads[4] = dl * hT.transpose();
  out.grads[5] = dl.rowwise().sum();
  Mat dhT = Wo.transpose() * dl;
  if (drop) dhT = (dhT.array() * dm.masks[1].array()).matrix();
  std::array<Mat, kWindow> ext2;
  ext2[kWindow - 1] = dhT;
  std::array<Mat, kWindow> dx2;
  lstm_layer_backward(W2, c2, b.mask, ext2, p.hidden, out.grads[2], out.grads[3], &dx2);
  std::array<Mat, kWindow> ext1;
  for (std::size_t t = 0; t < kWindow; ++t)
    ext1[t] = drop ? Mat((dx2[t].array() * dm.masks[0].array()).matrix()) : dx2[t];
  lstm_layer_backward(W1, c1, b.mask, ext1, p.hidden, out.grads[0], out.grads[1], nullptr);
  return out;
}

inline Mat flatten(const Batch& b) {
  Mat x(static_cast<Eigen::Index>(kWindow * kFeatureCount), b.size);
  for (std::size_t t = 0; t < kWindow; ++t)
    x.middleRows(static_cast<Eigen::Index>(t * kFeatureCount), kFeatureCount) = b.x[t];
  return x;
}

inline LossAndGrad dnn_run(const ModelParams& p, const Batch& b, const DropoutMasks& dm, bool want_grad) {
  const bool drop = !dm.masks.empty();
  const std::size_t L = kDnnWidths.size();
  std::vector<Mat> acts{flatten(b)};  // inputs to each layer
  std::vector<Mat> tanhs;             // pre-dropout activations
  for (std::size_t l = 0; l < L; ++l) {
    Mat z = p.tensors[2 * l] * acts.back();
    z.colwise() += p.tensors[2 * l + 1].col(0);
    if (l + 1 == L) {
      acts.push_back(z);
      break;
    }
    Mat a = z.array().tanh().matrix();
    tanhs.push_back(a);
    if (drop) a = (a.array() * dm.masks[l].array()).matrix();
    acts.push_back(a);
  }
  LossAndGrad out;
  out.probs = softmax(acts.back());
  if (b.labels.empty()) return out;
  out.loss = cross_entropy(out.probs, b.labels);
  if (!want_grad) return out;
  out.grads = zero_like(p).tensors;
  Mat d = dlogits(out.probs, b.labels);
  for (std::size_t l = L; l-- > 0;) {
    out.grads[2 * l] = d * acts[l].transpose();
    out.grads[2 * l + 1] = d.rowwise().sum();
    if (l == 0) break;
    Mat da = p.tensors[2 * l].transpose() * d;
    if (drop) da = (da.array() * dm.masks[l - 1].array()).matrix();
    d = (da.array() * (1.0 - tanhs[l - 1].array().square())).matrix();
  }
  return out;
}

inline LossAndGrad run(const ModelParams& p, const Batch& b, const DropoutMasks& dm, bool want_grad) {
  return p.arch == Architecture::Lstm2 ? lstm_run(p, b, dm, want_grad) : dnn_run(p, b, dm, want_grad);
}

}  // namespace detail

enum class Mode : std::uint8_t { Train, Infer };

// Class probabilities for one sequence. Train mode applies dropout masks
// drawn from the parameter seed.
inline Eigen::Vector4d forward(const ModelParams& params, const LabeledSequence& seq, Mode mode = Mode::Infer) {
  check_shapes(params);
  const LabeledSequence* one[] = {&seq};
  detail::Batch b = detail::make_batch(one);
  b.labels.clear();
  detail::DropoutMasks dm;
  if (mode == Mode::Train) {
    Rng rng(derive_seed(params.seed, 0xD80));
    dm = detail::draw_masks(params, 1, rng);
  }
  return detail::run(params, b, dm, false).probs.col(0);
}

// Mean cross-entropy over `seqs` and its gradient for every tensor, without
// dropout. Exposed for gradient checking.
inline std::pair<double, std::vector<Eigen::MatrixXd>> loss_and_gradients(const ModelParams& params,
                                                                          const std::vector<LabeledSequence>& seqs) {
  check_shapes(params);
  std::vector<const LabeledSequence*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  auto r = detail::run(params, detail::make_batch(ptrs), {}, true);
  return {r.loss, std::move(r.grads)};
}

// Probabilities (4 x N) for many sequences, in inference mode.
inline Eigen::MatrixXd predict(const ModelParams& params, const std::vector<LabeledSequence>& seqs) {
  check_shapes(params);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(kClasses), static_cast<Eigen::Index>(seqs.size()));
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < seqs.size(); start += kChunk) {
    std::vector<const LabeledSequence*> ptrs;
    for (std::size_t i = start; i < std::min(seqs.size(), start + kChunk); ++i) ptrs.push_back(&seqs[i]);
    auto b = detail::make_batch(ptrs);
    b.labels.clear();
    out.middleCols(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(ptrs.size())) =
        detail::run(params, b, {}, false).probs;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 1;
};

struct TrainResult {
  ModelParams params;
  std::vector<double> loss_trace;  // one entry per iteration (pass over the data)
};

// Adam on mean cross-entropy. Each iteration is one pass over the shuffled
// training set in minibatches; its trace entry is the mean minibatch loss.
inline TrainResult train(ModelParams params, const std::vector<LabeledSequence>& data, const TrainConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  if (cfg.batch == 0) throw std::invalid_argument("train: batch must be positive");
  check_shapes(params);
  std::vector<Eigen::MatrixXd> m = zero_like(params).tensors, v = m;
  std::uint64_t step = 0;
  Rng dropout_rng(derive_seed(params.seed ^ cfg.seed, 0xD80));
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  TrainResult out;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, 0x5A00 + epoch));
    shuffle_rng.shuffle(order);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      std::vector<const LabeledSequence*> ptrs;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch); ++i) ptrs.push_back(&data[order[i]]);
      const auto b = detail::make_batch(ptrs);
      const auto dm = detail::draw_masks(params, b.size, dropout_rng);
      auto r = detail::run(params, b, dm, true);
      if (!std::isfinite(r.loss))
        throw DivergenceDetected("loss became non-finite at iteration " + std::to_string(epoch + 1));
      ++step;
      const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      for (std::size_t k = 0; k < params.tensors.size(); ++k) {
        const auto& g = r.grads[k];
        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
        v[k] = (cfg.beta2 * v[k].array() + (1.0 - cfg.beta2) * g.array().square()).matrix();
        params.tensors[k].array() -= cfg.lr * (m[k].array() / c1) / ((v[k].array() / c2).sqrt() + cfg.eps);
      }
      sum += r.loss;
      ++batches;
    }
    out.loss_trace.push_back(sum / static_cast<double>(batches));
  }
  for (const auto& t : params.tensors)
    if (!t.allFinite()) throw DivergenceDetected("parameters became non-finite");
  out.params = std::move(params);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

using ConfusionMatrix = std::array<std::array<std::uint64_t, kClasses>, kClasses>;  // [true][predicted]

struct Evaluation {
  double accuracy = 0.0;
  ConfusionMatrix confusion{};
  std::size_t total = 0;
};

inline std::size_t argmax(const Eigen::Ref<const Eigen::VectorXd>& p) {
  Eigen::Index i = 0;
  p.maxCoeff(&i);
  return static_cast<std::size_t>(i);
}

inline Evaluation evaluate_predictions(const Eigen::MatrixXd& probs, const std::vector<LabeledSequence>& test) {
  if (test.empty()) throw std::invalid_argument("evaluate: test set is empty");
  Evaluation e;
  e.total = test.size();
  std::size_t correct = 0;
  for (std::size_t j = 0; j < test.size(); ++j) {
    const std::size_t pred = argmax(probs.col(static_cast<Eigen::Index>(j)));
    const auto truth = static_cast<std::size_t>(test[j].label);
    e.confusion[truth][pred] += 1;
    if (pred == truth) ++correct;
  }
  e.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  return e;
}

inline Evaluation evaluate(const ModelParams& params, const std::vector<LabeledSequence>& test) {
  return evaluate_predictions(predict(params, test), test);
}

// ---------------------------------------------------------------------------
// VRI and countermeasures

inline constexpr std::array<double, kClasses> kClassCenters = {0.125, 0.375, 0.625, 0.875};
inline constexpr double kVriFloor = 1e-6;

inline double vri_from_probabilities(const Eigen::Ref<const Eigen::VectorXd>& p) {
  double v = 0.0;
  for (std::size_t k = 0; k < kClasses; ++k) v += p(static_cast<Eigen::Index>(k)) * kClassCenters[k];
  return std::clamp(v, kVriFloor, 1.0);
}

struct Thresholds {
  double alpha = 0.4;
  double beta = 0.8;

  void validate() const {
    if (!(0.0 < alpha && alpha < beta && beta < 1.0))
      throw ConfigInvalid("assessment thresholds: need 0 < alpha < beta < 1");
  }
};

enum class Countermeasure : std::uint8_t { None = 0, Warning = 1, Suspension = 2 };

inline const char* to_string(Countermeasure c) {
  switch (c) {
    case Countermeasure::None: return "none";
    case Countermeasure::Warning: return "warning";
    case Countermeasure::Suspension: return "suspension";
  }
  return "?";
}

inline Countermeasure countermeasure_for(double vri, const Thresholds& th) {
  if (vri <= th.alpha) return Countermeasure::None;
  if (vri <= th.beta) return Countermeasure::Warning;
  return Countermeasure::Suspension;
}

struct VriReport {
  double vri = 0.0;
  PublicKey vehicle;
  Signature signature;  // echoed from the vehicle's latest record
  RiskLevel predicted_level = RiskLevel::Low;
};

struct Assessment {
  VriReport report;
  Countermeasure countermeasure = Countermeasure::None;
};

inline Assessment assess(const ModelParams& params, const Chain& chain, const PublicKey& vehicle,
                         const Thresholds& th = {}) {
  th.validate();
  if (!chain.registered(vehicle) || !chain.latest(vehicle))
    throw UnknownVehicle("vehicle " + vehicle.hex() + " has no admitted records");
  const auto history = query_history(chain, vehicle, kWindow);
  const LabeledSequence seq = make_sequence(history, chain.params().limits);
  const Eigen::Vector4d p = forward(params, seq, Mode::Infer);
  Assessment a;
  a.report.vri = vri_from_probabilities(p);
  a.report.vehicle = vehicle;
  a.report.signature = history.back().signature;
  a.report.predicted_level = static_cast<RiskLevel>(argmax(p));
  a.countermeasure = countermeasure_for(a.report.vri, th);
  return a;
}

// ---------------------------------------------------------------------------
// Model files: "BESTMDL\0", format version, architecture, shapes, then
// every value as a big-endian IEEE-754 double.

inline constexpr std::uint32_t kModelFormatVersion = 1;

inline Bytes serialize_model(const ModelParams& p) {
  check_shapes(p);
  ByteWriter w;
  static constexpr char kMagic[8] = {'B', 'E', 'S', 'T', 'M', 'D', 'L', '\0'};
  w.raw(ByteView(reinterpret_cast<const std::uint8_t*>(kMagic), 8));
  w.u32(kModelFormatVersion);
  w.u8(static_cast<std::uint8_t>(p.arch));
  w.u32(static_cast<std::uint32_t>(p.hidden));
  w.f64(p.dropout);
  w.u64(p.seed);
  w.u32(static_cast<std::uint32_t>(p.tensors.size()));
  for (const auto& t : p.tensors) {
    w.u32(static_cast<std::uint32_t>(t.rows()));
    w.u32(static_cast<std::uint32_t>(t.cols()));
    for (Eigen::Index c = 0; c < t.cols(); ++c)
      for (Eigen::Index r = 0; r < t.rows(); ++r) w.f64(t(r, c));
  }
  return std::move(w).take();
}

inline ModelParams deserialize_model(ByteView bytes) {
  ByteReader r(bytes);
  const ByteView magic = r.raw(8);
  if (std::string(magic.begin(), magic.end()) != std::string("BESTMDL\0", 8)) throw DecodeError("not a model file");
  if (r.u32() != kModelFormatVersion) throw DecodeError("unsupported model format version");
  ModelParams p;
  const std::uint8_t arch = r.u8();
  if (arch > 1) throw DecodeError("unknown architecture");
  p.arch = static_cast<Architecture>(arch);
  p.hidden = r.u32();
  p.dropout = r.f64();
  p.seed = r.u64();
  const std::uint32_t n = r.u32();
  if (n > 64) throw DecodeError("too many tensors");
  for (std::uint32_t k = 0; k < n; ++k) {
    const std::uint32_t rows = r.u32(), cols = r.u32();
    if (static_cast<std::uint64_t>(rows) * cols > (1u << 24)) throw DecodeError("tensor too large");
    Eigen::MatrixXd t(rows, cols);
    for (Eigen::Index c = 0; c < t.cols(); ++c)
      for (Eigen::Index rr = 0; rr < t.rows(); ++rr) t(rr, c) = r.f64();
    p.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw DecodeError("trailing bytes in model file");
  check_shapes(p);
  return p;
}

}  // namespace best
