#pragma once

// Policy training: next-token SFT warm start, then group-relative RL with a
// clipped probability-ratio surrogate and a per-token KL estimator against a
// frozen reference policy.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "genloop/policy.hpp"
#include "genloop/rewardmodel.hpp"
#include "genloop/world.hpp"

namespace genloop::trainers {

struct SftConfig {
  int epochs = 30;
  int batch = 16;
  double lr = 2e-3;
  uint64_t seed = 0;

  void validate() const {
    if (epochs <= 0 || batch <= 0 || lr <= 0)
      throw ConfigError("SFT config fields must be positive");
  }
};

// Minimizes the mean negative sequence log-probability of the answers.
// Returns per-epoch loss (mean over sequences).
std::vector<double> run_sft(policy::PolicyNet& net,
                            const std::vector<world::VqaTriplet>& data,
                            const SftConfig& cfg);

enum class AdvantageMode : int { Std, MeanOnly };

struct GrpoConfig {
  int group = 8;            // completions per prompt
  double clip = 0.2;        // ratio clip width
  double kl_coef = 0.04;    // weight of the KL estimator term
  double alpha = 0.8;       // reward-model coefficient in the composite reward
  double beta = 0.2;        // extract-match coefficient
  double temperature = 1.0; // rollout sampling temperature
  int steps = 60;
  int prompts_per_step = 8;
  double lr = 2e-4;
  uint64_t seed = 0;
  double adv_eps = 1e-6;    // zero-variance guard
  AdvantageMode advantage_mode = AdvantageMode::Std;

  void validate() const {
    if (group < 2) throw ConfigError("GRPO group size must be at least 2");
    if (!(clip > 0.0 && clip < 1.0)) throw ConfigError("GRPO clip must lie in (0,1)");
    if (alpha < 0.0 || beta < 0.0)
      throw ConfigError("GRPO reward coefficients must be non-negative");
    if (temperature <= 0.0) throw ConfigError("GRPO temperature must be positive");
    if (steps <= 0 || prompts_per_step <= 0 || lr <= 0)
      throw ConfigError("GRPO step configuration must be positive");
  }
};

// The bare two-term combination; exposed so its arithmetic is testable with
// injected scores.
inline double combine_reward(double score, bool match, double alpha, double beta) {
  return alpha * score + beta * (match ? 1.0 : 0.0);
}

// alpha * scored reward + beta * [extract(completion) == extract(oracle)],
// both extracts valid.
double composite_reward(const rm::RewardNet& rmnet, const world::VqaTriplet& prompt,
                        const std::vector<int>& completion,
                        const std::vector<int>& oracle_answer, double alpha,
                        double beta);

// Group-standardized advantages; a group whose reward spread is below eps
// (or mean-only mode) degrades gracefully.
std::vector<double> group_advantages(const std::vector<double>& rewards,
                                     double eps,
                                     AdvantageMode mode = AdvantageMode::Std);

// One prompt's rollout: completions with their behavior-policy log-probs,
// reference log-probs, and composite rewards.
struct GroupRollout {
  policy::Prompt prompt;
  std::vector<policy::Completion> completions;
  std::vector<std::vector<double>> ref_logprobs;  // per completion, per token
  std::vector<double> rewards;
  std::vector<double> advantages;
};

// Clipped-surrogate + KL loss over a set of rollouts; gradient is taken
// through the current net's per-token log-probs only.
template <class T>
nn::Var<T> grpo_loss_graph(nn::Tape<T>& tape, const policy::PolicyNetT<T>& net,
                           const std::vector<GroupRollout>& rollouts,
                           double clip, double kl_coef);

double grpo_loss(const policy::PolicyNet& net,
                 const std::vector<GroupRollout>& rollouts, const GrpoConfig& cfg);

struct GrpoTraceRow {
  int step = 0;
  double mean_reward = 0.0;
  double loss = 0.0;
  double kl = 0.0;
  double val_accuracy = -1.0;  // -1 when not evaluated this step
};

using RewardFn = std::function<double(const policy::Prompt&, const std::vector<int>&)>;

struct GrpoPrompt {
  policy::Prompt prompt;
  world::VqaTriplet source;  // carries the oracle answer
};

// Full GRPO run against a reward model + oracle composite reward. `ref` is a
// frozen snapshot (normally the SFT checkpoint) and is never updated.
std::vector<GrpoTraceRow> run_grpo(policy::PolicyNet& net,
                                   const policy::PolicyNet& ref,
                                   const rm::RewardNet& rmnet,
                                   const std::vector<world::VqaTriplet>& prompts,
                                   const GrpoConfig& cfg,
                                   const std::vector<world::VqaTriplet>* val_set = nullptr,
                                   int eval_every = 0);

// Generic-reward variant used by the toy-bandit convergence oracle.
std::vector<GrpoTraceRow> run_grpo_with_reward(policy::PolicyNet& net,
                                               const policy::PolicyNet& ref,
                                               const std::vector<policy::Prompt>& prompts,
                                               const RewardFn& reward,
                                               const GrpoConfig& cfg);

// ---------------------------------------------------------------------------
// Loss graph (templated for the finite-difference oracle)
// ---------------------------------------------------------------------------

namespace detail {

// Flattens rollouts into one forward batch plus per-token constants.
struct FlatRollouts {
  std::vector<double> old_lp;     // behavior-policy log-probs
  std::vector<double> advantage;  // per token (completion advantage repeated)
  int total = 0;
};

template <class T>
std::vector<policy::BatchItemT<T>> rollout_items(
    const std::vector<GroupRollout>& rollouts, FlatRollouts* flat) {
  std::vector<policy::BatchItemT<T>> items;
  for (const auto& r : rollouts) {
    if (r.completions.size() != r.advantages.size() ||
        r.completions.size() != r.ref_logprobs.size())
      throw DataError("grpo rollout bookkeeping is inconsistent");
    for (size_t c = 0; c < r.completions.size(); ++c) {
      const auto& comp = r.completions[c];
      if (comp.tokens.empty()) throw DataError("grpo rollout has an empty completion");
      if (comp.tokens.size() != comp.logprobs.size() ||
          comp.tokens.size() != r.ref_logprobs[c].size())
        throw DataError("grpo rollout log-prob lengths disagree");
      policy::BatchItemT<T> item;
      item.img = r.prompt.img.template cast<T>();
      item.attr = r.prompt.attr.template cast<T>();
      item.question = r.prompt.question;
      item.answer = comp.tokens;
      items.push_back(std::move(item));
      if (flat) {
        for (size_t t = 0; t < comp.tokens.size(); ++t) {
          flat->old_lp.push_back(comp.logprobs[t]);
          flat->advantage.push_back(r.advantages[c]);
          flat->total += 1;
        }
      }
    }
  }
  if (items.empty()) throw ConfigError("grpo loss: no rollouts");
  return items;
}

}  // namespace detail

template <class T>
nn::Var<T> grpo_loss_graph(nn::Tape<T>& tape, const policy::PolicyNetT<T>& net,
                           const std::vector<GroupRollout>& rollouts,
                           double clip, double kl_coef) {
  using namespace genloop::nn;
  detail::FlatRollouts flat;
  auto items = detail::rollout_items<T>(rollouts, &flat);

  // reference log-probs through the same batch layout, so net == ref gives
  // an exactly zero KL term
  std::vector<double> ref_lp;
  for (const auto& r : rollouts)
    for (const auto& per_tok : r.ref_logprobs)
      ref_lp.insert(ref_lp.end(), per_tok.begin(), per_tok.end());

  Var<T> lp_new = policy::answer_logprob_graph(tape, net, items);
  const int n = flat.total;
  if (lp_new.rows() != n) throw DataError("grpo loss: token count mismatch");

  MatX<T> old_c(n, 1), adv_mask(n, 1), ref_c(n, 1), kl_shift(n, 1);
  double clipped_const = 0.0;
  for (int t = 0; t < n; ++t) {
    double p = static_cast<double>(lp_new.value()(t, 0));
    double rho = std::exp(p - flat.old_lp[static_cast<size_t>(t)]);
    double a = flat.advantage[static_cast<size_t>(t)];
    double unclipped = rho * a;
    double clipped = std::clamp(rho, 1.0 - clip, 1.0 + clip) * a;
    if (unclipped <= clipped) {
      adv_mask(t, 0) = static_cast<T>(a);  // gradient flows through rho
    } else {
      adv_mask(t, 0) = T(0);
      clipped_const += clipped;
    }
    old_c(t, 0) = static_cast<T>(flat.old_lp[static_cast<size_t>(t)]);
    ref_c(t, 0) = static_cast<T>(ref_lp[static_cast<size_t>(t)]);
    kl_shift(t, 0) = static_cast<T>(-ref_lp[static_cast<size_t>(t)] - 1.0);
  }

  Var<T> rho = exp(sub(lp_new, tape.constant(old_c)));
  MatX<T> clip_total = MatX<T>::Constant(1, 1, static_cast<T>(clipped_const));
  Var<T> surrogate = add_const(sum(cmul(rho, adv_mask)), clip_total);

  // per-token estimator exp(q - p) - (q - p) - 1 with q = reference log-prob
  Var<T> e = exp(sub(tape.constant(ref_c), lp_new));
  Var<T> kl_terms = add_const(add(e, lp_new), kl_shift);
  Var<T> kl_sum = sum(kl_terms);

  const T inv_n = static_cast<T>(1.0 / n);
  return add(scale(surrogate, -inv_n), scale(kl_sum, static_cast<T>(kl_coef) * inv_n));
}

}  // namespace genloop::trainers
