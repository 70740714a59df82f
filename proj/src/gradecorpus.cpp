#include "genloop/gradecorpus.hpp"

#include <algorithm>
#include <cmath>

namespace genloop::grade {

using namespace genloop::world;

double score_for_grade(int grade) {
  switch (grade) {
    case 1: return 10.0;
    case 2: return 6.0;
    case 3: return 0.0;
    case 4: return -6.0;
  }
  throw ConfigError("grade must be 1..4");
}

std::vector<int> perturb_synonym(const std::vector<int>& answer, uint64_t seed,
                                 double rate) {
  if (rate < 0.0 || rate > 1.0) throw ConfigError("synonym rate outside [0,1]");
  const Vocab& v = Vocab::instance();
  Rng rng(mix64(seed, 0x53594e));
  std::vector<int> out = answer;
  for (int& tok : out) {
    if (v.is_marker(tok)) continue;
    int cls = v.synonym_class_of(tok);
    if (cls < 0) continue;
    if (rng.uniform() >= rate) continue;
    const auto& members = v.synonym_classes()[static_cast<size_t>(cls)];
    std::vector<int> others;
    for (int m : members)
      if (m != tok) others.push_back(m);
    if (others.empty()) continue;
    tok = others[static_cast<size_t>(rng.below_int(static_cast<int>(others.size())))];
  }
  return out;
}

std::vector<int> delete_phrases(const std::vector<int>& answer, uint64_t seed,
                                double lo, double hi) {
  if (!(lo > 0.0 && lo <= hi && hi <= 1.0))
    throw ConfigError("delete_phrases: bad span fraction range");
  const Vocab& v = Vocab::instance();
  Rng rng(mix64(seed, 0x44454c));

  std::vector<size_t> content;
  for (size_t i = 0; i < answer.size(); ++i)
    if (!v.is_marker(answer[i])) content.push_back(i);
  const int n = static_cast<int>(content.size());
  if (n == 0) return answer;

  int k, start;
  if (n < 3) {
    k = 1;
    start = rng.below_int(n);
  } else {
    double f = rng.uniform(lo, hi);
    k = std::clamp(static_cast<int>(std::lround(f * n)), 1, n);
    start = rng.below_int(n - k + 1);
  }

  std::vector<bool> drop(answer.size(), false);
  for (int j = start; j < start + k; ++j) drop[content[static_cast<size_t>(j)]] = true;
  std::vector<int> out;
  for (size_t i = 0; i < answer.size(); ++i)
    if (!drop[i]) out.push_back(answer[i]);
  return out;
}

std::vector<int> make_irrelevant(const VqaTriplet& host,
                                 const std::vector<VqaTriplet>& donors,
                                 uint64_t seed) {
  if (donors.empty()) throw ConfigError("make_irrelevant: donor pool is empty");
  const Vocab& v = Vocab::instance();
  Rng rng(mix64(seed, 0x495252));
  std::string host_key = item_key(host, false);

  if (rng.uniform() < 0.5) {
    // irrelevant branch: an answer from a different (image, question) pair
    for (int attempt = 0; attempt < 16; ++attempt) {
      const VqaTriplet& d =
          donors[static_cast<size_t>(rng.below_int(static_cast<int>(donors.size())))];
      if (item_key(d, false) == host_key) continue;
      if (d.answer == host.answer) continue;
      return d.answer;
    }
    // donor pool had nothing usable; fall through to hallucination
  }

  // hallucination branch: host answer with an out-of-domain value
  static const char* fillers[2] = {"phantom", "artifact"};
  int filler = v.id(fillers[rng.below_int(2)]);
  std::vector<int> out;
  bool in_span = false;
  for (int tok : host.answer) {
    if (tok == v.ans_open()) {
      out.push_back(tok);
      out.push_back(filler);
      in_span = true;
    } else if (tok == v.ans_close()) {
      out.push_back(tok);
      in_span = false;
    } else if (!in_span) {
      out.push_back(tok);
    }
  }
  return out;
}

std::vector<GradedExample> build_graded_dataset(
    const std::vector<VqaTriplet>& oracle_pool, const GradeCounts& counts,
    uint64_t seed) {
  if (counts.g1 < 0 || counts.g2 < 0 || counts.g3 < 0 || counts.g4 < 0)
    throw ConfigError("grade counts must be non-negative");
  int need = std::max({counts.g1, counts.g2, counts.g3, counts.g4});
  if (static_cast<int>(oracle_pool.size()) < need || oracle_pool.empty())
    throw ConfigError("insufficient oracle triplets for the requested grade counts");

  std::vector<GradedExample> out;
  out.reserve(static_cast<size_t>(counts.total()));
  for (int grade = 1; grade <= 4; ++grade) {
    int count = (grade == 1   ? counts.g1
                 : grade == 2 ? counts.g2
                 : grade == 3 ? counts.g3
                              : counts.g4);
    Rng pick(mix64(seed, static_cast<uint64_t>(grade), 0x504b));
    std::vector<int> idx =
        pick.sample_indices(static_cast<int>(oracle_pool.size()), count);
    for (int j = 0; j < count; ++j) {
      GradedExample ex;
      ex.triplet = oracle_pool[static_cast<size_t>(idx[static_cast<size_t>(j)])];
      ex.grade = grade;
      ex.target = score_for_grade(grade);
      ex.corruption_seed =
          mix64(seed, static_cast<uint64_t>(grade) << 32, static_cast<uint64_t>(j));
      switch (grade) {
        case 1:
          break;  // untouched
        case 2:
          ex.triplet.answer = perturb_synonym(ex.triplet.answer, ex.corruption_seed);
          ex.triplet.provenance = Provenance::Corrupted;
          break;
        case 3:
          ex.triplet.answer = delete_phrases(ex.triplet.answer, ex.corruption_seed);
          ex.triplet.provenance = Provenance::Corrupted;
          break;
        case 4:
          ex.triplet.answer =
              make_irrelevant(ex.triplet, oracle_pool, ex.corruption_seed);
          ex.triplet.provenance = Provenance::Corrupted;
          break;
      }
      out.push_back(std::move(ex));
    }
  }
  return out;
}

}  // namespace genloop::grade
