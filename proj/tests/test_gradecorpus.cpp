#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "genloop/gradecorpus.hpp"

using namespace genloop;
using namespace genloop::grade;
using namespace genloop::world;

namespace {

std::vector<VqaTriplet> oracle_pool(int n, uint64_t seed) {
  auto mix = default_modality_mixture();
  std::vector<VqaTriplet> pool;
  const auto& templates = question_templates();
  for (int i = 0; i < n; ++i) {
    SynthImage img = sample_image(mix64(seed, static_cast<uint64_t>(i)), mix);
    int tid = i % static_cast<int>(templates.size());
    Question q = render_question(templates[static_cast<size_t>(tid)].task, tid, img);
    pool.push_back({img, q, oracle_answer(img, q), Provenance::Oracle});
  }
  return pool;
}

}  // namespace

TEST_CASE("grade-score mapping is total and fixed") {
  CHECK(score_for_grade(1) == 10.0);
  CHECK(score_for_grade(2) == 6.0);
  CHECK(score_for_grade(3) == 0.0);
  CHECK(score_for_grade(4) == -6.0);
  CHECK_THROWS_AS(score_for_grade(0), ConfigError);
  CHECK_THROWS_AS(score_for_grade(5), ConfigError);
}

TEST_CASE("perturb_synonym") {
  const Vocab& v = Vocab::instance();
  auto answer = v.encode("THINK see round /THINK ANS 3 /ANS EOS");
  SUBCASE("rate 0 is the identity") {
    CHECK(perturb_synonym(answer, 9, 0.0) == answer);
  }
  SUBCASE("rate 1 replaces every content token that has an entry") {
    auto out = perturb_synonym(answer, 9, 1.0);
    CHECK(v.decode(out) == "THINK observe circular /THINK ANS three /ANS EOS");
  }
  SUBCASE("markers are never touched") {
    for (uint64_t s = 0; s < 200; ++s) {
      auto out = perturb_synonym(answer, s, 0.7);
      REQUIRE(out.size() == answer.size());
      for (size_t i = 0; i < out.size(); ++i)
        if (v.is_marker(answer[i])) CHECK(out[i] == answer[i]);
    }
  }
  SUBCASE("extract-equivalence holds across 1000 seeded perturbations") {
    auto pool = oracle_pool(50, 21);
    int checked = 0;
    for (uint64_t s = 0; s < 1000; ++s) {
      const auto& t = pool[s % pool.size()];
      auto out = perturb_synonym(t.answer, s, 0.3);
      CHECK(extract_value(out) == extract_value(t.answer));
      ++checked;
    }
    CHECK(checked == 1000);
  }
}

TEST_CASE("delete_phrases") {
  const Vocab& v = Vocab::instance();
  SUBCASE("fraction 0.2 of 10 content tokens removes exactly 2") {
    std::vector<int> answer;
    for (int i = 0; i < 10; ++i) answer.push_back(v.id("see"));
    auto out = delete_phrases(answer, 7, 0.2, 0.2);
    CHECK(out.size() == 8);
  }
  SUBCASE("short answers lose one token") {
    auto answer = v.encode("ANS 3 /ANS EOS");  // one content token
    auto out = delete_phrases(answer, 5);
    CHECK(v.decode(out) == "ANS /ANS EOS");
    CHECK(!extract_value(out).has_value());
  }
  SUBCASE("markers survive deletion") {
    auto pool = oracle_pool(30, 4);
    for (uint64_t s = 0; s < 300; ++s) {
      const auto& t = pool[s % pool.size()];
      auto out = delete_phrases(t.answer, s);
      int markers_in = 0, markers_out = 0;
      for (int tok : t.answer) markers_in += v.is_marker(tok);
      for (int tok : out) markers_out += v.is_marker(tok);
      CHECK(markers_in == markers_out);
      CHECK(out.size() < t.answer.size());
    }
  }
  SUBCASE("removed fraction is uniform over [0.2, 0.5]") {
    std::vector<int> answer;
    for (int i = 0; i < 20; ++i) answer.push_back(v.id("see"));
    const int n = 10000;
    std::map<int, int> hist;
    for (uint64_t s = 0; s < n; ++s) {
      auto out = delete_phrases(answer, s);
      hist[static_cast<int>(answer.size() - out.size())]++;
    }
    // k = lround(20f): half-width buckets at both edges
    std::map<int, double> expect = {{4, 1.0 / 12}, {5, 1.0 / 6}, {6, 1.0 / 6},
                                    {7, 1.0 / 6},  {8, 1.0 / 6}, {9, 1.0 / 6},
                                    {10, 1.0 / 12}};
    double seen = 0;
    for (const auto& [k, p] : expect) {
      double freq = hist[k] / static_cast<double>(n);
      double sigma = std::sqrt(p * (1 - p) / n);
      CHECK(std::abs(freq - p) < 3 * sigma + 1e-9);
      seen += hist[k];
    }
    CHECK(seen == n);
  }
}

TEST_CASE("make_irrelevant") {
  auto pool = oracle_pool(60, 77);
  const Vocab& v = Vocab::instance();
  SUBCASE("hallucination values fall outside every domain") {
    // single-donor pool forces the hallucination branch
    std::vector<VqaTriplet> only_host = {pool[0]};
    for (uint64_t s = 0; s < 50; ++s) {
      auto out = make_irrelevant(pool[0], only_host, s);
      CHECK(!extract_value(out).has_value());
      std::string text = v.decode(out);
      bool has_filler = text.find("phantom") != std::string::npos ||
                        text.find("artifact") != std::string::npos;
      CHECK(has_filler);
    }
  }
  SUBCASE("every output differs from the host oracle answer") {
    for (uint64_t s = 0; s < 2000; ++s) {
      const auto& host = pool[s % pool.size()];
      auto out = make_irrelevant(host, pool, s);
      CHECK(out != host.answer);
    }
  }
  SUBCASE("branch ratio is 0.5 within 3 sigma over 10k seeds") {
    const int n = 10000;
    int halluc = 0;
    for (uint64_t s = 0; s < n; ++s) {
      auto out = make_irrelevant(pool[s % pool.size()], pool, s);
      std::string text = v.decode(out);
      if (text.find("phantom") != std::string::npos ||
          text.find("artifact") != std::string::npos)
        ++halluc;
    }
    double freq = halluc / static_cast<double>(n);
    double sigma = std::sqrt(0.25 / n);
    CHECK(std::abs(freq - 0.5) < 3 * sigma);
  }
  SUBCASE("empty donor pool is a configuration error") {
    CHECK_THROWS_AS(make_irrelevant(pool[0], {}, 1), ConfigError);
  }
}

TEST_CASE("build_graded_dataset") {
  auto pool = oracle_pool(80, 31);
  GradeCounts counts{10, 10, 10, 10};
  auto corpus = build_graded_dataset(pool, counts, 5);

  SUBCASE("counts and score multiset") {
    REQUIRE(corpus.size() == 40);
    std::map<double, int> scores;
    for (const auto& ex : corpus) scores[ex.target]++;
    CHECK(scores[10.0] == 10);
    CHECK(scores[6.0] == 10);
    CHECK(scores[0.0] == 10);
    CHECK(scores[-6.0] == 10);
    double mean = 0;
    for (const auto& ex : corpus) mean += ex.target;
    CHECK(mean / 40.0 == doctest::Approx(2.5));
  }
  SUBCASE("grade 1 examples are byte-identical to their sources") {
    std::set<std::string> pool_keys;
    for (const auto& t : pool) pool_keys.insert(item_key(t, true));
    for (const auto& ex : corpus) {
      if (ex.grade != 1) continue;
      CHECK(pool_keys.count(item_key(ex.triplet, true)) == 1);
      CHECK(ex.triplet.provenance == Provenance::Oracle);
      CHECK(ex.triplet.answer ==
            oracle_answer(ex.triplet.image, ex.triplet.question));
    }
  }
  SUBCASE("grades 3 and 4 break token-level oracle agreement >= 0.95") {
    auto big_pool = oracle_pool(500, 91);
    GradeCounts big{0, 0, 400, 400};
    auto c2 = build_graded_dataset(big_pool, big, 6);
    int broken = 0, total = 0;
    for (const auto& ex : c2) {
      auto oracle = oracle_answer(ex.triplet.image, ex.triplet.question);
      if (ex.triplet.answer != oracle) ++broken;
      ++total;
    }
    CHECK(total == 800);
    CHECK(static_cast<double>(broken) / total >= 0.95);
  }
  SUBCASE("deterministic under seed") {
    auto again = build_graded_dataset(pool, counts, 5);
    REQUIRE(again.size() == corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) {
      CHECK(again[i].triplet == corpus[i].triplet);
      CHECK(again[i].grade == corpus[i].grade);
      CHECK(again[i].corruption_seed == corpus[i].corruption_seed);
    }
  }
  SUBCASE("insufficient pool is a configuration error") {
    auto tiny = oracle_pool(5, 1);
    CHECK_THROWS_AS(build_graded_dataset(tiny, GradeCounts{10, 0, 0, 0}, 1),
                    ConfigError);
    CHECK_THROWS_AS(build_graded_dataset({}, GradeCounts{1, 1, 1, 1}, 1),
                    ConfigError);
  }
}
