#pragma once

// Four-grade reward supervision built by corrupting oracle triplets:
// grade 1 untouched, grade 2 synonym-perturbed, grade 3 phrase-deleted,
// grade 4 irrelevant or hallucinated. Target scores are fixed per grade.

#include <cstdint>
#include <vector>

#include "genloop/world.hpp"

namespace genloop::grade {

struct GradedExample {
  world::VqaTriplet triplet;
  int grade = 1;        // 1..4
  double target = 10.0; // {10, 6, 0, -6}
  uint64_t corruption_seed = 0;
};

double score_for_grade(int grade);

// Each non-marker token with a synonym-table entry is swapped with the given
// probability; value semantics survive because extract() normalizes back.
std::vector<int> perturb_synonym(const std::vector<int>& answer, uint64_t seed,
                                 double rate = 0.3);

// Removes one contiguous run of non-marker tokens covering a uniform
// fraction of them in [lo, hi]; answers under 3 content tokens lose one.
std::vector<int> delete_phrases(const std::vector<int>& answer, uint64_t seed,
                                double lo = 0.2, double hi = 0.5);

// Either the answer of a different (image, question) pair from the donor
// pool, or the host answer with its value replaced by a hallucination token.
std::vector<int> make_irrelevant(const world::VqaTriplet& host,
                                 const std::vector<world::VqaTriplet>& donors,
                                 uint64_t seed);

struct GradeCounts {
  int g1 = 0, g2 = 0, g3 = 0, g4 = 0;
  int total() const { return g1 + g2 + g3 + g4; }
};

std::vector<GradedExample> build_graded_dataset(
    const std::vector<world::VqaTriplet>& oracle_pool, const GradeCounts& counts,
    uint64_t seed);

}  // namespace genloop::grade
