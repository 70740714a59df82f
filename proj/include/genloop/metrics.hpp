#pragma once

// Evaluation: greedy decoding accuracy, balanced accuracy, macro-F1, AUROC
// on presence questions, and the four-way error-transition partition.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "genloop/policy.hpp"
#include "genloop/world.hpp"

namespace genloop::metrics {

struct ItemResult {
  world::Task task = world::Task::Counting;
  world::Modality modality = world::Modality::CT;
  std::string key;                    // item identity for set alignment
  std::string oracle_value;
  std::optional<std::string> predicted;
  bool correct = false;
  double yes_prob = 0.0;              // presence only
  bool has_yes_prob = false;
};

struct CellMetrics {
  int n = 0;
  double accuracy = 0.0;
  double balanced_accuracy = 0.0;
  double macro_f1 = 0.0;
  double auroc = 0.0;
  bool has_auroc = false;
};

struct EvalReport {
  std::vector<ItemResult> items;
  std::map<std::pair<int, int>, CellMetrics> cells;  // (task, modality)
  CellMetrics overall;
};

// Mann-Whitney AUROC with midranks; requires both classes present.
double auroc(const std::vector<double>& scores, const std::vector<bool>& labels);

EvalReport evaluate(const policy::PolicyNet& net,
                    const std::vector<world::VqaTriplet>& test_set);

struct TransitionCounts {
  int correct_correct = 0;
  int wrong_correct = 0;
  int correct_wrong = 0;
  int wrong_wrong = 0;
  int total() const {
    return correct_correct + wrong_correct + correct_wrong + wrong_wrong;
  }
};

struct TransitionReport {
  std::map<int, TransitionCounts> per_modality;
  TransitionCounts aggregate;
};

// Exact partition of the shared test set; throws DataError when the two
// reports were not produced on identical items.
TransitionReport error_transitions(const EvalReport& baseline,
                                   const EvalReport& candidate);

void write_eval_csv(const std::string& path, const EvalReport& report);
void write_transitions_csv(const std::string& path, const TransitionReport& report);

}  // namespace genloop::metrics
