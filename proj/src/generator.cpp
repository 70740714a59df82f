#include "genloop/generator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

namespace genloop::gen {

using namespace genloop::world;

namespace {
constexpr uint64_t kSaltCell = 0x43454c4c;
constexpr uint64_t kSaltImage = 0x494d47;
constexpr uint64_t kSaltAnswer = 0x414e53;
}  // namespace

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Direct: return "direct";
    case Strategy::StepByStep: return "step_by_step";
    case Strategy::MetaCognitive: return "meta_cognitive";
  }
  throw DataError("bad strategy");
}

Strategy strategy_from(const std::string& s) {
  if (s == "direct") return Strategy::Direct;
  if (s == "step_by_step") return Strategy::StepByStep;
  if (s == "meta_cognitive") return Strategy::MetaCognitive;
  throw DataError("unknown strategy: " + s);
}

std::array<StrategyProfile, kNumStrategies> default_profiles() {
  return {StrategyProfile{0.6, RationalePolicy::None},
          StrategyProfile{0.75, RationalePolicy::OracleTrace},
          StrategyProfile{0.9, RationalePolicy::OracleTraceSelfCheck}};
}

void validate_profiles(const std::array<StrategyProfile, kNumStrategies>& p) {
  for (const auto& s : p)
    if (s.p_correct < 0.0 || s.p_correct > 1.0)
      throw ConfigError("strategy correctness probability outside [0,1]");
  if (!(p[0].p_correct < p[1].p_correct && p[1].p_correct < p[2].p_correct))
    throw ConfigError("strategy quality must be ordered direct < step < meta");
}

int GenState::num_cells() {
  return kNumStrategies * static_cast<int>(question_templates().size()) *
         kNumModalities;
}

int GenState::cell_index(Strategy s, int template_id, Modality m) {
  int t = static_cast<int>(question_templates().size());
  return (static_cast<int>(s) * t + template_id) * kNumModalities +
         static_cast<int>(m);
}

GenState::Cell GenState::cell_of(int index) {
  int t = static_cast<int>(question_templates().size());
  Cell c;
  c.modality = static_cast<Modality>(index % kNumModalities);
  index /= kNumModalities;
  c.template_id = index % t;
  c.strategy = static_cast<Strategy>(index / t);
  return c;
}

GenState GenState::uniform() {
  GenState s;
  s.weights.assign(static_cast<size_t>(num_cells()),
                   1.0 / static_cast<double>(num_cells()));
  return s;
}

void GenState::validate() const {
  if (static_cast<int>(weights.size()) != num_cells())
    throw ConfigError("generator state has wrong cell count");
  double total = 0.0;
  for (double w : weights) {
    if (!(w > 0.0)) throw ConfigError("generator state weights must stay positive");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw ConfigError("generator state weights must sum to 1");
}

void GenState::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write generator state: " + path);
  out << "genstate v1\n" << update_count << "\n";
  char buf[64];
  for (double w : weights) {
    std::snprintf(buf, sizeof(buf), "%.17g", w);
    out << buf << "\n";
  }
}

GenState GenState::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open generator state: " + path);
  std::string header;
  std::getline(in, header);
  if (header != "genstate v1") throw DataError("bad generator state header");
  GenState s;
  if (!(in >> s.update_count)) throw DataError("truncated generator state");
  double w;
  while (in >> w) s.weights.push_back(w);
  s.validate();
  return s;
}

std::vector<int> render_rationale(const SynthImage& img, const Question& q,
                                  RationalePolicy policy) {
  if (policy == RationalePolicy::None) return {};
  std::vector<int> trace = oracle_trace(img, q);
  if (policy == RationalePolicy::OracleTraceSelfCheck)
    trace.push_back(Vocab::instance().id(answer_type_token(q.task)));
  return trace;
}

std::vector<Candidate> generate_candidates(
    const GenState& state, const std::array<StrategyProfile, kNumStrategies>& profiles,
    int n, uint64_t seed) {
  if (n <= 0) throw ConfigError("generate_candidates: n must be positive");
  state.validate();
  validate_profiles(profiles);

  std::vector<Candidate> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(mix64(seed, static_cast<uint64_t>(i), kSaltCell));
    int cell = rng.categorical(state.weights);
    GenState::Cell c = GenState::cell_of(cell);
    const StrategyProfile& prof = profiles[static_cast<size_t>(c.strategy)];

    Task task = question_templates()[static_cast<size_t>(c.template_id)].task;
    int template_id = c.template_id;
    if (c.strategy == Strategy::MetaCognitive) {
      // round-robin task coverage on the item index keeps generation
      // order-independent and the task histogram flat
      task = static_cast<Task>(i % kNumTasks);
      const auto& ids = templates_for(task);
      template_id =
          ids[static_cast<size_t>(rng.below_int(static_cast<int>(ids.size())))];
    }

    SynthImage img = sample_image_with_modality(
        mix64(seed, static_cast<uint64_t>(i), kSaltImage), c.modality);
    Question q = render_question(task, template_id, img);
    std::string value = oracle_value(img, q);

    Rng arng(mix64(seed, static_cast<uint64_t>(i), kSaltAnswer));
    if (arng.uniform() >= prof.p_correct) {
      const auto& dom = value_domain(task);
      std::vector<std::string> wrong;
      for (const auto& v : dom)
        if (v != value) wrong.push_back(v);
      value = wrong[static_cast<size_t>(arng.below_int(static_cast<int>(wrong.size())))];
    }

    std::vector<int> trace = render_rationale(img, q, prof.rationale);
    Candidate cand;
    cand.triplet.image = img;
    cand.triplet.question = q;
    cand.triplet.answer = compose_answer(
        trace, value, prof.rationale == RationalePolicy::OracleTraceSelfCheck, task);
    cand.triplet.provenance = Provenance::Generated;
    cand.strategy = c.strategy;
    cand.cell = cell;
    out.push_back(std::move(cand));
  }
  return out;
}

GenState self_update(const GenState& state,
                     const std::vector<std::pair<int, double>>& accepted_cell_rewards,
                     double eta) {
  state.validate();
  if (accepted_cell_rewards.empty()) return state;

  std::map<int, std::pair<double, int>> per_cell;  // cell -> (sum, count)
  for (const auto& [cell, reward] : accepted_cell_rewards) {
    if (cell < 0 || cell >= GenState::num_cells())
      throw DataError("self_update: cell index out of range");
    if (reward < -6.0 || reward > 10.0)
      throw DataError("self_update: reward outside [-6, 10]");
    auto& acc = per_cell[cell];
    acc.first += reward;
    acc.second += 1;
  }

  GenState next = state;
  for (const auto& [cell, acc] : per_cell) {
    double mean_reward = acc.first / static_cast<double>(acc.second);
    next.weights[static_cast<size_t>(cell)] *= std::exp(eta * mean_reward);
  }
  double total = 0.0;
  for (double w : next.weights) total += w;
  for (double& w : next.weights) w /= total;
  next.update_count += 1;
  return next;
}

GenState self_update(const GenState& state,
                     const std::vector<std::pair<Candidate, double>>& accepted,
                     double eta) {
  std::vector<std::pair<int, double>> cells;
  cells.reserve(accepted.size());
  for (const auto& [cand, reward] : accepted) cells.emplace_back(cand.cell, reward);
  return self_update(state, cells, eta);
}

}  // namespace genloop::gen
