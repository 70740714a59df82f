#include "genloop/rewardmodel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace genloop::rm {

using namespace genloop::world;
using namespace genloop::nn;

FeatureSpec FeatureSpec::current() {
  FeatureSpec s;
  s.vocab = Vocab::instance().size();
  return s;
}

Mat featurize(const VqaTriplet& t) {
  const Vocab& v = Vocab::instance();
  FeatureSpec spec = FeatureSpec::current();
  Mat f = Mat::Zero(1, spec.dim());

  for (int r = 0; r < kGridSide; ++r)
    for (int c = 0; c < kGridSide; ++c) {
      int cell = r * kGridSide + c;
      f(0, cell * kCellStates + t.image.cell_state(r, c)) = 1.0f;
    }

  int qbase = spec.grid_cells * spec.cell_states;
  for (int tok : t.question.tokens) {
    if (tok < 0 || tok >= spec.vocab)
      throw DataError("featurize: token id " + std::to_string(tok) +
                      " outside the vocabulary");
    f(0, qbase + tok) += 1.0f;
  }
  int abase = qbase + spec.vocab;
  for (int tok : t.answer) {
    if (tok < 0 || tok >= spec.vocab)
      throw DataError("featurize: token id " + std::to_string(tok) +
                      " outside the vocabulary");
    f(0, abase + tok) += 1.0f;
  }

  int sbase = abase + spec.vocab;
  f(0, sbase + 0) =
      has_wellformed_span(t.answer, v.think_open(), v.think_close()) ? 1.0f : 0.0f;
  f(0, sbase + 1) =
      has_wellformed_span(t.answer, v.ans_open(), v.ans_close()) ? 1.0f : 0.0f;
  f(0, sbase + 2) =
      static_cast<float>(t.answer.size()) / static_cast<float>(kMaxAnswerLen);
  return f;
}

RewardNet init_reward_net(uint64_t seed, int hidden) {
  RewardNet net;
  net.arch = MlpSpec{FeatureSpec::current().dim(), {hidden, hidden, 1}};
  mlp_alloc(net.params, net.arch);
  mlp_init(net.params, net.arch, mix64(seed, 0x524d));
  return net;
}

double score(const RewardNet& net, const VqaTriplet& t) {
  Tape<float> tape;
  return static_cast<double>(score_graph(tape, net, featurize(t)).scalar());
}

std::vector<double> score_batch(const RewardNet& net,
                                const std::vector<VqaTriplet>& ts) {
  // per-item scoring: a triplet's score never depends on its batch context,
  // which strict-threshold filtering relies on
  std::vector<double> out;
  out.reserve(ts.size());
  for (const auto& t : ts) out.push_back(score(net, t));
  return out;
}

namespace {

constexpr double kGradClip = 1.0;

// shared mini-batch MSE loop over (features, targets)
std::vector<double> run_regression(RewardNet& net, const Mat& features,
                                   const Mat& targets, const TrainRmConfig& cfg) {
  const int n = static_cast<int>(features.rows());
  if (n == 0) throw ConfigError("reward training set is empty");
  if (cfg.epochs <= 0 || cfg.batch <= 0 || cfg.lr <= 0)
    throw ConfigError("reward training config must be positive");

  AdamConfig adam;
  std::vector<double> trace;
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  auto full_loss = [&]() {
    Tape<float> tape;
    Var<float> full = mean(square(sub(score_graph(tape, net, features),
                                      tape.constant(targets))));
    double lv = static_cast<double>(full.scalar());
    if (!std::isfinite(lv)) throw TrainError("reward training loss became non-finite");
    return lv;
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // linear decay to a tenth of the base rate steadies the late epochs
    double frac = cfg.epochs > 1 ? static_cast<double>(epoch) / (cfg.epochs - 1) : 0.0;
    adam.lr = cfg.lr * (1.0 - 0.9 * frac);
    Rng rng(mix64(cfg.seed, static_cast<uint64_t>(epoch), 0x455043));
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(rng.below_int(i + 1))]);

    for (int start = 0; start < n; start += cfg.batch) {
      int b = std::min(cfg.batch, n - start);
      Mat bf(b, features.cols());
      Mat bt(b, 1);
      for (int i = 0; i < b; ++i) {
        bf.row(i) = features.row(order[static_cast<size_t>(start + i)]);
        bt.row(i) = targets.row(order[static_cast<size_t>(start + i)]);
      }
      Tape<float> tape;
      Var<float> s = score_graph(tape, net, bf);
      Var<float> loss = mean(square(sub(s, tape.constant(bt))));
      double lv = static_cast<double>(loss.scalar());
      if (!std::isfinite(lv)) throw TrainError("reward training loss became non-finite");
      tape.backward(loss);
      auto grads = tape.named_grads();
      // global-norm clip keeps the squash's saturation phase from spiking
      double norm_sq = 0.0;
      for (const auto& [name, g] : grads)
        norm_sq += static_cast<double>(g.cast<double>().array().square().sum());
      double norm = std::sqrt(norm_sq);
      if (norm > kGradClip) {
        float shrink = static_cast<float>(kGradClip / norm);
        for (auto& [name, g] : grads) g *= shrink;
      }
      adam_step(net.params, grads, adam);
    }
    trace.push_back(full_loss());
  }
  return trace;
}

}  // namespace

std::vector<double> train_rm(RewardNet& net,
                             const std::vector<grade::GradedExample>& corpus,
                             const TrainRmConfig& cfg) {
  if (corpus.empty()) throw ConfigError("train_rm: corpus is empty");
  Mat features(static_cast<Eigen::Index>(corpus.size()), net.arch.input_dim);
  Mat targets(static_cast<Eigen::Index>(corpus.size()), 1);
  for (size_t i = 0; i < corpus.size(); ++i) {
    features.row(static_cast<Eigen::Index>(i)) = featurize(corpus[i].triplet).row(0);
    targets(static_cast<Eigen::Index>(i), 0) = static_cast<float>(corpus[i].target);
  }
  return run_regression(net, features, targets, cfg);
}

bool loss_nonincreasing(const std::vector<double>& trace, double tol) {
  double best = std::numeric_limits<double>::infinity();
  for (double l : trace) {
    if (l > best * (1.0 + tol) + 1e-12) return false;
    best = std::min(best, l);
  }
  return true;
}

double derive_pref_target(const std::vector<int>& policy_answer,
                          const std::vector<int>& oracle_answer) {
  auto predicted = extract_value(policy_answer);
  auto expected = extract_value(oracle_answer);
  if (!expected)
    throw DataError("derive_pref_target: oracle answer failed extraction");
  if (!predicted) return -6.0;
  if (*predicted == *expected) {
    const Vocab& v = Vocab::instance();
    bool think =
        has_wellformed_span(policy_answer, v.think_open(), v.think_close());
    return think ? 10.0 : 6.0;
  }
  return 0.0;
}

RewardNet continual_update(const RewardNet& net,
                           const std::vector<PreferenceRecord>& prefs,
                           const std::vector<grade::GradedExample>& replay,
                           const TrainRmConfig& cfg) {
  if (prefs.empty()) return net;
  if (replay.empty())
    throw ConfigError("continual_update: replay set must be nonempty");

  RewardNet out = net;
  const int np = static_cast<int>(prefs.size());
  Mat features(2 * np, out.arch.input_dim);
  Mat targets(2 * np, 1);
  for (int i = 0; i < np; ++i) {
    features.row(i) = featurize(prefs[static_cast<size_t>(i)].triplet).row(0);
    targets(i, 0) = static_cast<float>(prefs[static_cast<size_t>(i)].target);
  }
  // 1:1 replay mix, sampled without replacement while the pool lasts
  Rng rng(mix64(cfg.seed, 0x5250));
  std::vector<int> picks;
  if (np <= static_cast<int>(replay.size())) {
    picks = rng.sample_indices(static_cast<int>(replay.size()), np);
  } else {
    std::vector<int> perm =
        rng.sample_indices(static_cast<int>(replay.size()),
                           static_cast<int>(replay.size()));
    for (int i = 0; i < np; ++i)
      picks.push_back(perm[static_cast<size_t>(i) % perm.size()]);
  }
  for (int i = 0; i < np; ++i) {
    const auto& ex = replay[static_cast<size_t>(picks[static_cast<size_t>(i)])];
    features.row(np + i) = featurize(ex.triplet).row(0);
    targets(np + i, 0) = static_cast<float>(ex.target);
  }
  run_regression(out, features, targets, cfg);
  return out;
}

}  // namespace genloop::rm
