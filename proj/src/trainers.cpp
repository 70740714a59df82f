#include "genloop/trainers.hpp"

#include <algorithm>
#include <cmath>

namespace genloop::trainers {

using namespace genloop::world;
using namespace genloop::nn;
using namespace genloop::policy;

std::vector<double> run_sft(PolicyNet& net, const std::vector<VqaTriplet>& data,
                            const SftConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw ConfigError("run_sft: training data is empty");

  std::vector<BatchItem> all;
  all.reserve(data.size());
  for (const auto& t : data) {
    BatchItem item;
    item.img = policy_image_features(t.image);
    item.attr = policy_attr_tokens(t.image);
    item.question = t.question.tokens;
    item.answer = t.answer;
    all.push_back(std::move(item));
  }
  const int n = static_cast<int>(all.size());

  auto batch_loss = [&](const std::vector<BatchItem>& items, bool train,
                        AdamConfig* adam) {
    Tape<float> tape;
    Var<float> lp = answer_logprob_graph(tape, net, items);
    Var<float> loss =
        scale(sum(lp), -1.0f / static_cast<float>(items.size()));
    double lv = static_cast<double>(loss.scalar());
    if (!std::isfinite(lv)) throw TrainError("SFT loss became non-finite");
    if (train) {
      tape.backward(loss);
      adam_step(net.params, tape.named_grads(), *adam);
    }
    return lv;
  };

  std::vector<double> trace;
  // entry 0: pre-training loss over the whole set (chunked mean)
  {
    double total = 0.0;
    for (int start = 0; start < n; start += 64) {
      int b = std::min(64, n - start);
      std::vector<BatchItem> chunk(all.begin() + start, all.begin() + start + b);
      total += batch_loss(chunk, false, nullptr) * b;
    }
    trace.push_back(total / n);
  }

  AdamConfig adam;
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // linear decay to a fifth of the base rate
    double frac = cfg.epochs > 1 ? static_cast<double>(epoch) / (cfg.epochs - 1) : 0.0;
    adam.lr = cfg.lr * (1.0 - 0.8 * frac);
    Rng rng(mix64(cfg.seed, static_cast<uint64_t>(epoch), 0x53465400));
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(rng.below_int(i + 1))]);
    double total = 0.0;
    for (int start = 0; start < n; start += cfg.batch) {
      int b = std::min(cfg.batch, n - start);
      std::vector<BatchItem> chunk;
      chunk.reserve(static_cast<size_t>(b));
      for (int i = 0; i < b; ++i)
        chunk.push_back(all[static_cast<size_t>(order[static_cast<size_t>(start + i)])]);
      total += batch_loss(chunk, true, &adam) * b;
    }
    trace.push_back(total / n);
  }
  return trace;
}

double composite_reward(const rm::RewardNet& rmnet, const VqaTriplet& prompt,
                        const std::vector<int>& completion,
                        const std::vector<int>& oracle_answer, double alpha,
                        double beta) {
  VqaTriplet scored = prompt;
  scored.answer = completion;
  scored.provenance = Provenance::Policy;
  double r = rm::score(rmnet, scored);
  auto got = world::extract_value(completion);
  auto want = world::extract_value(oracle_answer);
  bool match = got.has_value() && want.has_value() && *got == *want;
  return combine_reward(r, match, alpha, beta);
}

std::vector<double> group_advantages(const std::vector<double>& rewards, double eps,
                                     AdvantageMode mode) {
  if (rewards.size() < 2)
    throw ConfigError("group_advantages needs at least two rewards");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  if (mode == AdvantageMode::MeanOnly) {
    std::vector<double> out;
    out.reserve(rewards.size());
    for (double r : rewards) out.push_back(r - mean);
    return out;
  }
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  double std_pop = std::sqrt(var / n);
  std::vector<double> out(rewards.size(), 0.0);
  if (std_pop < eps) return out;  // degenerate group: no signal
  for (size_t i = 0; i < rewards.size(); ++i)
    out[i] = (rewards[i] - mean) / (std_pop + eps);
  return out;
}

namespace {

// per-token ref log-probs for a batch of completions, through the same
// batched forward layout the loss graph will use
std::vector<std::vector<double>> ref_token_logprobs(
    const PolicyNet& ref, const std::vector<BatchItem>& items) {
  Tape<float> tape;
  std::vector<std::pair<int, int>> spans;
  Var<float> lp = answer_logprob_graph(tape, ref, items, &spans);
  std::vector<std::vector<double>> out;
  out.reserve(items.size());
  for (const auto& [off, len] : spans) {
    std::vector<double> one(static_cast<size_t>(len));
    for (int t = 0; t < len; ++t)
      one[static_cast<size_t>(t)] = static_cast<double>(lp.value()(off + t, 0));
    out.push_back(std::move(one));
  }
  return out;
}

double mean_kl_value(const std::vector<GroupRollout>& rollouts,
                     const PolicyNet& net) {
  // recompute p under the current net with the same layout, then average the
  // estimator; used for trace reporting only
  std::vector<BatchItem> items;
  for (const auto& r : rollouts)
    for (const auto& comp : r.completions) {
      BatchItem item;
      item.img = r.prompt.img;
      item.attr = r.prompt.attr;
      item.question = r.prompt.question;
      item.answer = comp.tokens;
      items.push_back(std::move(item));
    }
  auto p_tok = ref_token_logprobs(net, items);
  double kl = 0.0;
  int n = 0;
  size_t flat = 0;
  for (const auto& r : rollouts)
    for (const auto& q_tok : r.ref_logprobs) {
      const auto& p = p_tok[flat++];
      for (size_t t = 0; t < q_tok.size(); ++t) {
        double d = q_tok[t] - p[t];
        kl += std::exp(d) - d - 1.0;
        ++n;
      }
    }
  return n ? kl / n : 0.0;
}

std::vector<GrpoTraceRow> run_grpo_impl(
    PolicyNet& net, const PolicyNet& ref, const std::vector<Prompt>& prompts,
    const std::vector<const VqaTriplet*>& sources, const rm::RewardNet* rmnet,
    const RewardFn* reward_fn, const GrpoConfig& cfg,
    const std::vector<VqaTriplet>* val_set, int eval_every) {
  cfg.validate();
  if (prompts.empty()) throw ConfigError("run_grpo: no prompts");

  AdamConfig adam;
  adam.lr = cfg.lr;
  std::vector<GrpoTraceRow> trace;

  for (int step = 0; step < cfg.steps; ++step) {
    Rng rng(mix64(cfg.seed, static_cast<uint64_t>(step), 0x475253));
    int per_step = std::min(cfg.prompts_per_step, static_cast<int>(prompts.size()));
    std::vector<int> picks =
        rng.sample_indices(static_cast<int>(prompts.size()), per_step);

    std::vector<GroupRollout> rollouts;
    double reward_total = 0.0;
    int reward_count = 0;
    for (int slot = 0; slot < per_step; ++slot) {
      int pi = picks[static_cast<size_t>(slot)];
      GroupRollout roll;
      roll.prompt = prompts[static_cast<size_t>(pi)];
      roll.completions = sample_group(
          net, roll.prompt, cfg.group, cfg.temperature,
          mix64(cfg.seed, static_cast<uint64_t>(step) << 20 | static_cast<uint64_t>(slot),
                0x524f4c));

      std::vector<BatchItem> items;
      for (const auto& comp : roll.completions) {
        BatchItem item;
        item.img = roll.prompt.img;
        item.attr = roll.prompt.attr;
        item.question = roll.prompt.question;
        item.answer = comp.tokens;
        items.push_back(std::move(item));
      }
      roll.ref_logprobs = ref_token_logprobs(ref, items);

      for (const auto& comp : roll.completions) {
        double r;
        if (reward_fn) {
          r = (*reward_fn)(roll.prompt, comp.tokens);
        } else {
          const VqaTriplet& src = *sources[static_cast<size_t>(pi)];
          r = composite_reward(*rmnet, src, comp.tokens, src.answer, cfg.alpha,
                               cfg.beta);
        }
        roll.rewards.push_back(r);
        reward_total += r;
        ++reward_count;
      }
      roll.advantages =
          group_advantages(roll.rewards, cfg.adv_eps, cfg.advantage_mode);
      rollouts.push_back(std::move(roll));
    }

    Tape<float> tape;
    Var<float> loss = grpo_loss_graph(tape, net, rollouts, cfg.clip, cfg.kl_coef);
    double lv = static_cast<double>(loss.scalar());
    if (!std::isfinite(lv)) throw TrainError("GRPO loss became non-finite");
    tape.backward(loss);
    adam_step(net.params, tape.named_grads(), adam);

    GrpoTraceRow row;
    row.step = step;
    row.mean_reward = reward_total / std::max(reward_count, 1);
    row.loss = lv;
    row.kl = mean_kl_value(rollouts, net);
    if (val_set && eval_every > 0 &&
        (step % eval_every == eval_every - 1 || step == cfg.steps - 1)) {
      int correct = 0;
      for (const auto& t : *val_set) {
        Completion c = sample_answer(net, make_prompt(t), 0.0,
                                     mix64(cfg.seed, 0x4556, static_cast<uint64_t>(step)));
        auto got = extract_answer(c.tokens);
        auto want = extract_answer(t.answer);
        if (got && want && *got == *want) ++correct;
      }
      row.val_accuracy = static_cast<double>(correct) /
                         static_cast<double>(val_set->size());
    }
    trace.push_back(row);
  }
  return trace;
}

}  // namespace

double grpo_loss(const PolicyNet& net, const std::vector<GroupRollout>& rollouts,
                 const GrpoConfig& cfg) {
  Tape<float> tape;
  return static_cast<double>(
      grpo_loss_graph(tape, net, rollouts, cfg.clip, cfg.kl_coef).scalar());
}

std::vector<GrpoTraceRow> run_grpo(PolicyNet& net, const PolicyNet& ref,
                                   const rm::RewardNet& rmnet,
                                   const std::vector<VqaTriplet>& prompts,
                                   const GrpoConfig& cfg,
                                   const std::vector<VqaTriplet>* val_set,
                                   int eval_every) {
  std::vector<Prompt> ps;
  std::vector<const VqaTriplet*> sources;
  ps.reserve(prompts.size());
  for (const auto& t : prompts) {
    ps.push_back(make_prompt(t));
    sources.push_back(&t);
  }
  return run_grpo_impl(net, ref, ps, sources, &rmnet, nullptr, cfg, val_set,
                       eval_every);
}

std::vector<GrpoTraceRow> run_grpo_with_reward(PolicyNet& net, const PolicyNet& ref,
                                               const std::vector<Prompt>& prompts,
                                               const RewardFn& reward,
                                               const GrpoConfig& cfg) {
  std::vector<const VqaTriplet*> sources(prompts.size(), nullptr);
  return run_grpo_impl(net, ref, prompts, sources, nullptr, &reward, cfg, nullptr,
                       0);
}

}  // namespace genloop::trainers
