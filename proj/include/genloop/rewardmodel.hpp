#pragma once

// Learned triplet scorer: bag-of-token + grid features into a small tanh MLP
// whose output is squashed into the open score interval (-6, 10). Trained by
// plain MSE regression on graded examples and preference records.

#include <cstdint>
#include <string>
#include <vector>

#include "genloop/gradecorpus.hpp"
#include "genloop/nn.hpp"
#include "genloop/world.hpp"

namespace genloop::rm {

constexpr double kScoreLow = -6.0;
constexpr double kScoreRange = 16.0;  // score = -6 + 16*sigmoid(head)
// The sigmoid is shrunk by this margin so a saturated head still lands
// strictly inside (-6, 10) after float rounding. The midpoint is unaffected.
constexpr double kScoreMargin = 1e-6;

struct FeatureSpec {
  int grid_cells = world::kGridCells;
  int cell_states = world::kCellStates;
  int vocab = 0;  // filled from the live vocabulary

  static FeatureSpec current();
  int dim() const { return grid_cells * cell_states + 2 * vocab + 3; }
};

// One row: grid one-hots, question bag, answer bag, then
// {has-think-span, has-ans-span, answer_len / answer_cap}.
nn::Mat featurize(const world::VqaTriplet& t);

template <class T>
struct RewardNetT {
  nn::ParamSetT<T> params;
  nn::MlpSpec arch;

  std::string describe() const { return "reward;" + arch.describe(); }

  template <class U>
  RewardNetT<U> cast() const {
    return RewardNetT<U>{params.template cast<U>(), arch};
  }
};

using RewardNet = RewardNetT<float>;

RewardNet init_reward_net(uint64_t seed, int hidden = 64);

// Squashed score head on an already-featurized batch.
template <class T>
nn::Var<T> score_graph(nn::Tape<T>& tape, const RewardNetT<T>& net,
                       const nn::MatX<T>& features) {
  nn::Var<T> head = nn::mlp_forward(tape, net.params, features, net.arch);
  const T gain = static_cast<T>(kScoreRange * (1.0 - 2.0 * kScoreMargin));
  const T base = static_cast<T>(kScoreLow + kScoreRange * kScoreMargin);
  nn::MatX<T> shift = nn::MatX<T>::Constant(head.rows(), 1, base);
  return nn::add_const(nn::scale(nn::sigmoid(head), gain), shift);
}

double score(const RewardNet& net, const world::VqaTriplet& t);
std::vector<double> score_batch(const RewardNet& net,
                                const std::vector<world::VqaTriplet>& ts);

struct TrainRmConfig {
  int epochs = 300;
  int batch = 256;
  double lr = 2e-3;
  uint64_t seed = 0;
};

// Mini-batch MSE against the example targets; returns per-epoch training loss.
std::vector<double> train_rm(RewardNet& net,
                             const std::vector<grade::GradedExample>& corpus,
                             const TrainRmConfig& cfg);

// Soft check on a loss trace: no epoch may sit more than tol above the best
// seen so far.
bool loss_nonincreasing(const std::vector<double>& trace, double tol = 0.05);

// Grade-ladder target for a policy-produced answer given the oracle answer.
double derive_pref_target(const std::vector<int>& policy_answer,
                          const std::vector<int>& oracle_answer);

struct PreferenceRecord {
  world::VqaTriplet triplet;  // policy answer inside
  double target = 0.0;
  int iteration = 0;
};

// Trains on new preferences mixed 1:1 with replayed graded examples; empty
// preference sets return the net unchanged.
RewardNet continual_update(const RewardNet& net,
                           const std::vector<PreferenceRecord>& prefs,
                           const std::vector<grade::GradedExample>& replay,
                           const TrainRmConfig& cfg);

}  // namespace genloop::rm
