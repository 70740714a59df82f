#pragma once

// Closed-loop orchestration: generate -> score -> filter -> admit -> SFT ->
// RL -> preference sampling -> reward-model update -> generator update, with
// per-iteration checkpointing and byte-identical resume.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "genloop/config.hpp"
#include "genloop/generator.hpp"
#include "genloop/gradecorpus.hpp"
#include "genloop/records.hpp"
#include "genloop/rewardmodel.hpp"
#include "genloop/trainers.hpp"
#include "genloop/world.hpp"

namespace genloop::loop {

struct LoopConfig {
  int iterations = 3;          // T
  int candidates = 4000;       // generated per iteration
  double tau = 4.0;            // strict admission threshold
  bool allow_overlap = false;
  int seed_corpus = 500;       // |D_seed|
  int val_size = 320;
  int grade_pool = 600;        // oracle triplets feeding the graded corpus
  int grade_per_class = 400;
  int pref_samples = 1000;     // preference completions per iteration
  double gen_eta = 0.1;
  bool sft_from_scratch = false;
  std::vector<double> mixture = world::default_modality_mixture();
  trainers::SftConfig sft;
  trainers::GrpoConfig grpo;
  rm::TrainRmConfig rm_init;
  rm::TrainRmConfig rm_update;
  uint64_t master_seed = 0;

  LoopConfig() {
    rm_update.epochs = 40;
    grpo.steps = 40;
  }

  void validate() const;
  // stable description fed into the manifest hash
  std::string describe() const;
};

LoopConfig loop_config_from(const config::Config& cfg);

struct LoopState {
  int iteration = 0;  // completed iterations
  std::vector<records::Record> corpus;  // admitted samples incl. the seed set
  gen::GenState gen_state;
  policy::PolicyNet policy_net;
  rm::RewardNet reward_net;
};

struct IterationMetrics {
  int iteration = 0;
  int corpus_size = 0;
  int candidates = 0;
  int admitted = 0;
  double mean_candidate_score = 0.0;
  double sft_loss = 0.0;
  double grpo_mean_reward = 0.0;
  double val_accuracy = 0.0;
};

// Indices of scored candidates that strictly beat the threshold.
std::vector<size_t> filter_high(const std::vector<double>& scores, double tau);

// Order-stable removal of already-admitted keys; key includes the answer.
std::vector<size_t> dedup(const std::vector<gen::Candidate>& high,
                          const std::vector<size_t>& high_idx,
                          const std::vector<records::Record>& corpus);

// Deterministic oracle sets derived from the master seed.
std::vector<world::VqaTriplet> seed_triplets(const LoopConfig& cfg);
std::vector<world::VqaTriplet> val_triplets(const LoopConfig& cfg);
std::vector<grade::GradedExample> graded_corpus(const LoopConfig& cfg);

// Fresh state: seed corpus admitted at iteration 0, reward model trained on
// the graded corpus, untrained policy, uniform generator.
LoopState init_state(const LoopConfig& cfg);

struct IterationOutput {
  IterationMetrics metrics;
  std::vector<records::Record> admitted;     // records newly added this pass
  std::vector<records::Record> preferences;  // policy samples with targets
};

IterationOutput loop_iteration(LoopState& state, const LoopConfig& cfg);

// Runs (or resumes) up to `stop_after` iterations (all when < 0), persisting
// run_dir/iter_<t>/ checkpoints with a manifest per iteration.
LoopState run_loop(const LoopConfig& cfg, const std::string& run_dir,
                   int stop_after = -1);

// Loads the state persisted for a completed iteration.
LoopState load_iteration(const LoopConfig& cfg, const std::string& run_dir,
                         int iteration);

}  // namespace genloop::loop
