#pragma once

// Candidate generator: samples (strategy, template, modality) cells from a
// categorical state, emits answers whose correctness rate depends on the
// strategy, and reweights its cells from the rewards of accepted samples.

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "genloop/world.hpp"

namespace genloop::gen {

enum class Strategy : int { Direct, StepByStep, MetaCognitive };
constexpr int kNumStrategies = 3;

std::string strategy_name(Strategy s);
Strategy strategy_from(const std::string& s);

enum class RationalePolicy : int { None, OracleTrace, OracleTraceSelfCheck };

struct StrategyProfile {
  double p_correct = 0.0;
  RationalePolicy rationale = RationalePolicy::None;
};

// direct < step-by-step < meta-cognitive in answer quality; the meta profile
// additionally balances task coverage during generation.
std::array<StrategyProfile, kNumStrategies> default_profiles();
void validate_profiles(const std::array<StrategyProfile, kNumStrategies>& p);

struct GenState {
  std::vector<double> weights;  // (strategy, template, modality) cells, sum 1
  long long update_count = 0;

  static int num_cells();
  static int cell_index(Strategy s, int template_id, world::Modality m);
  struct Cell {
    Strategy strategy;
    int template_id;
    world::Modality modality;
  };
  static Cell cell_of(int index);

  static GenState uniform();
  void validate() const;

  void save(const std::string& path) const;
  static GenState load(const std::string& path);
};

struct Candidate {
  world::VqaTriplet triplet;
  Strategy strategy = Strategy::Direct;
  int cell = 0;
};

std::vector<int> render_rationale(const world::SynthImage& img,
                                  const world::Question& q, RationalePolicy policy);

std::vector<Candidate> generate_candidates(
    const GenState& state, const std::array<StrategyProfile, kNumStrategies>& profiles,
    int n, uint64_t seed);

// Multiplicative exponentiated-reward reweighting of the cells that produced
// accepted samples; eta is the update temperature.
GenState self_update(const GenState& state,
                     const std::vector<std::pair<int, double>>& accepted_cell_rewards,
                     double eta = 0.1);
GenState self_update(const GenState& state,
                     const std::vector<std::pair<Candidate, double>>& accepted,
                     double eta = 0.1);

}  // namespace genloop::gen
