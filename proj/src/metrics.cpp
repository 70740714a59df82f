#include "genloop/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace genloop::metrics {

using namespace genloop::world;
using namespace genloop::policy;

double auroc(const std::vector<double>& scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size())
    throw DataError("auroc: score/label size mismatch");
  size_t pos = 0, neg = 0;
  for (bool l : labels) (l ? pos : neg)++;
  if (pos == 0 || neg == 0)
    throw DataError("auroc: needs both classes present");

  // midrank Mann-Whitney
  std::vector<size_t> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return scores[a] < scores[b];
  });
  std::vector<double> rank(scores.size());
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  for (size_t k = 0; k < scores.size(); ++k)
    if (labels[k]) rank_sum_pos += rank[k];
  double u = rank_sum_pos - static_cast<double>(pos) * (pos + 1) / 2.0;
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

namespace {

// shared accuracy/balanced-accuracy/macro-F1 folding over a slice of items
CellMetrics fold_metrics(const std::vector<const ItemResult*>& items) {
  CellMetrics m;
  m.n = static_cast<int>(items.size());
  if (items.empty()) return m;

  int correct = 0;
  // class key: (task, oracle value); predictions align by task
  std::map<std::pair<int, std::string>, std::array<int, 3>> stats;  // tp, fn, fp
  for (const ItemResult* it : items) {
    if (it->correct) ++correct;
    auto key = std::make_pair(static_cast<int>(it->task), it->oracle_value);
    auto& s = stats[key];
    if (it->correct) s[0]++;
    else s[1]++;
    if (it->predicted && !it->correct) {
      auto pk = std::make_pair(static_cast<int>(it->task), *it->predicted);
      stats[pk][2]++;
    }
  }
  m.accuracy = static_cast<double>(correct) / m.n;

  double recall_sum = 0.0, f1_sum = 0.0;
  int classes = 0;
  for (const auto& [key, s] : stats) {
    int tp = s[0], fn = s[1], fp = s[2];
    if (tp + fn == 0) continue;  // never the true class here
    ++classes;
    double recall = static_cast<double>(tp) / (tp + fn);
    recall_sum += recall;
    double precision = (tp + fp) ? static_cast<double>(tp) / (tp + fp) : 0.0;
    f1_sum += (precision + recall > 0.0)
                  ? 2.0 * precision * recall / (precision + recall)
                  : 0.0;
  }
  m.balanced_accuracy = classes ? recall_sum / classes : 0.0;
  m.macro_f1 = classes ? f1_sum / classes : 0.0;

  // AUROC over presence items from the model's yes-sequence probability
  std::vector<double> scores;
  std::vector<bool> labels;
  for (const ItemResult* it : items)
    if (it->has_yes_prob) {
      scores.push_back(it->yes_prob);
      labels.push_back(it->oracle_value == "yes");
    }
  bool both = false;
  if (!scores.empty()) {
    size_t pos = 0;
    for (bool l : labels)
      if (l) ++pos;
    both = pos > 0 && pos < labels.size();
  }
  if (both) {
    m.auroc = auroc(scores, labels);
    m.has_auroc = true;
  }
  return m;
}

}  // namespace

EvalReport evaluate(const PolicyNet& net, const std::vector<VqaTriplet>& test_set) {
  if (test_set.empty()) throw ConfigError("evaluate: test set is empty");
  EvalReport report;
  report.items.reserve(test_set.size());

  for (const auto& t : test_set) {
    ItemResult item;
    item.task = t.question.task;
    item.modality = t.image.modality;
    item.key = item_key(t, false);
    item.oracle_value = oracle_value(t.image, t.question);

    Prompt prompt = make_prompt(t);
    Completion c = sample_answer(net, prompt, 0.0, 0);  // greedy evaluation
    item.predicted = extract_answer(c.tokens);
    item.correct = item.predicted && *item.predicted == item.oracle_value;

    if (t.question.task == Task::Presence) {
      // probability of the oracle-format yes answer sequence
      auto yes_answer =
          compose_answer(oracle_trace(t.image, t.question), "yes", false,
                         Task::Presence);
      item.yes_prob = std::exp(sequence_logprob(net, prompt, yes_answer));
      item.has_yes_prob = true;
    }
    report.items.push_back(std::move(item));
  }

  std::map<std::pair<int, int>, std::vector<const ItemResult*>> cells;
  std::vector<const ItemResult*> all;
  for (const auto& item : report.items) {
    cells[{static_cast<int>(item.task), static_cast<int>(item.modality)}]
        .push_back(&item);
    all.push_back(&item);
  }
  for (const auto& [key, items] : cells)
    report.cells[key] = fold_metrics(items);
  report.overall = fold_metrics(all);
  return report;
}

TransitionReport error_transitions(const EvalReport& baseline,
                                   const EvalReport& candidate) {
  if (baseline.items.size() != candidate.items.size())
    throw DataError("error_transitions: test sets differ in size");
  TransitionReport report;
  for (size_t i = 0; i < baseline.items.size(); ++i) {
    const ItemResult& b = baseline.items[i];
    const ItemResult& c = candidate.items[i];
    if (b.key != c.key)
      throw DataError("error_transitions: test sets are not aligned");
    TransitionCounts& m = report.per_modality[static_cast<int>(b.modality)];
    if (b.correct && c.correct) {
      m.correct_correct++;
      report.aggregate.correct_correct++;
    } else if (!b.correct && c.correct) {
      m.wrong_correct++;
      report.aggregate.wrong_correct++;
    } else if (b.correct && !c.correct) {
      m.correct_wrong++;
      report.aggregate.correct_wrong++;
    } else {
      m.wrong_wrong++;
      report.aggregate.wrong_wrong++;
    }
  }
  return report;
}

void write_eval_csv(const std::string& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write eval csv: " + path);
  out << "task,modality,n,accuracy,balanced_accuracy,macro_f1,auroc\n";
  char buf[256];
  auto line = [&](const std::string& task, const std::string& mod,
                  const CellMetrics& m) {
    std::string auc = m.has_auroc ? [&] {
      char b[32];
      std::snprintf(b, sizeof(b), "%.6f", m.auroc);
      return std::string(b);
    }() : std::string();
    std::snprintf(buf, sizeof(buf), "%s,%s,%d,%.6f,%.6f,%.6f,%s\n", task.c_str(),
                  mod.c_str(), m.n, m.accuracy, m.balanced_accuracy, m.macro_f1,
                  auc.c_str());
    out << buf;
  };
  for (const auto& [key, m] : report.cells)
    line(task_name(static_cast<Task>(key.first)),
         modality_name(static_cast<Modality>(key.second)), m);
  line("all", "all", report.overall);
}

void write_transitions_csv(const std::string& path, const TransitionReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write transitions csv: " + path);
  out << "modality,correct_correct,wrong_correct,correct_wrong,wrong_wrong\n";
  for (const auto& [mod, counts] : report.per_modality)
    out << modality_name(static_cast<Modality>(mod)) << ','
        << counts.correct_correct << ',' << counts.wrong_correct << ','
        << counts.correct_wrong << ',' << counts.wrong_wrong << '\n';
  out << "all," << report.aggregate.correct_correct << ','
      << report.aggregate.wrong_correct << ',' << report.aggregate.correct_wrong
      << ',' << report.aggregate.wrong_wrong << '\n';
}

}  // namespace genloop::metrics
