#include <doctest.h>

#include <cmath>
#include <map>

#include "genloop/gradecorpus.hpp"
#include "genloop/policy.hpp"

using namespace genloop;
using namespace genloop::policy;
using namespace genloop::world;
using nn::Mat;

namespace {

PolicyArch toy_arch(int vocab, int img_feat = 4, int cap = 2) {
  PolicyArch a;
  a.vocab = vocab;
  a.img_feat = img_feat;
  a.embed = 8;
  a.width = 16;
  a.heads = 2;
  a.layers = 1;
  a.mlp_hidden = 16;
  a.max_answer = cap;
  a.max_ctx = 16;
  a.eos_id = 1;
  return a;
}

PolicyNet toy_net(uint64_t seed, int vocab = 5, int cap = 2) {
  PolicyNet net = init_policy_net(toy_arch(vocab), seed);
  // nonzero head so the distribution is nontrivial
  Rng rng(mix64(seed, 0x77));
  Mat& hw = net.params["head_w"];
  for (Eigen::Index r = 0; r < hw.rows(); ++r)
    for (Eigen::Index c = 0; c < hw.cols(); ++c)
      hw(r, c) = static_cast<float>(rng.normal() * 0.8);
  net.arch.max_answer = cap;
  return net;
}

Prompt toy_prompt(const PolicyNet& net, uint64_t seed) {
  Rng rng(mix64(seed, 0x88));
  Prompt p;
  p.img = Mat::Zero(1, net.arch.img_feat);
  for (int i = 0; i < net.arch.img_feat; ++i)
    p.img(0, i) = static_cast<float>(rng.normal());
  p.question = {2, 3};
  return p;
}

VqaTriplet world_item(uint64_t seed) {
  auto mix = default_modality_mixture();
  SynthImage img = sample_image(seed, mix);
  int tid = static_cast<int>(seed % 12);
  Question q =
      render_question(question_templates()[static_cast<size_t>(tid)].task, tid, img);
  return {img, q, oracle_answer(img, q), Provenance::Oracle};
}

}  // namespace

TEST_CASE("policy image features are one-hot structured") {
  auto t = world_item(5);
  Mat f = policy_image_features(t.image);
  CHECK(f.cols() == kPolicyImgFeat);
  // count block sums to one
  CHECK(f.block(0, 0, 1, 6).sum() == 1.0f);
  // modality block ends the vector
  int base = kPolicyImgFeat - kNumModalities;
  CHECK(f(0, base + static_cast<int>(t.image.modality)) == 1.0f);
}

TEST_CASE("zero-initialized head is uniform at every position") {
  PolicyNet net = init_policy_net(3);
  auto t = world_item(9);
  Mat logits = forward_logits(net, make_prompt(t), t.answer);
  CHECK(logits.rows() == net.arch.prefix_rows() +
                             static_cast<int>(t.question.tokens.size()) +
                             static_cast<int>(t.answer.size()));
  CHECK(logits.cwiseAbs().maxCoeff() == 0.0f);
  // uniform distribution: logprob of any answer is -len * ln(V)
  double lp = sequence_logprob(net, make_prompt(t), t.answer);
  double expect = -static_cast<double>(t.answer.size()) *
                  std::log(static_cast<double>(net.arch.vocab));
  CHECK(lp == doctest::Approx(expect).epsilon(1e-5));
}

TEST_CASE("causality: perturbing answer token k only reaches later positions") {
  PolicyNet net = toy_net(11, 6, 8);
  Prompt prompt = toy_prompt(net, 2);
  std::vector<int> answer = {2, 3, 4, 2, 5};
  Mat base = forward_logits(net, prompt, answer);
  int prefix = 1 + static_cast<int>(prompt.question.size());
  for (size_t k = 0; k < answer.size(); ++k) {
    auto mutated = answer;
    mutated[k] = (mutated[k] + 1) % net.arch.vocab;
    if (mutated[k] == net.arch.eos_id) mutated[k] = (mutated[k] + 1) % net.arch.vocab;
    Mat got = forward_logits(net, prompt, mutated);
    // rows strictly before the mutated input position are bit-identical
    int cut = prefix + static_cast<int>(k);
    CHECK((got.topRows(cut) - base.topRows(cut)).cwiseAbs().maxCoeff() == 0.0f);
    CHECK((got.bottomRows(got.rows() - cut) - base.bottomRows(got.rows() - cut))
              .cwiseAbs()
              .maxCoeff() > 0.0f);
  }
}

TEST_CASE("seed-7 net matches an explicit-loop reimplementation") {
  PolicyNet net = toy_net(7, 6, 8);
  Prompt prompt = toy_prompt(net, 7);
  std::vector<int> answer = {4, 2, 5};
  Mat got = forward_logits(net, prompt, answer);

  // independent oracle: plain double loops over the same parameters
  const PolicyArch& a = net.arch;
  std::vector<int> toks = prompt.question;
  toks.insert(toks.end(), answer.begin(), answer.end());
  const int n = 1 + static_cast<int>(toks.size());
  auto P = [&](const std::string& name) { return net.params[name]; };

  std::vector<std::vector<double>> x(static_cast<size_t>(n),
                                     std::vector<double>(static_cast<size_t>(a.width), 0.0));
  for (int c = 0; c < a.width; ++c) {
    double acc = 0.0;
    for (int f = 0; f < a.img_feat; ++f)
      acc += static_cast<double>(prompt.img(0, f)) * P("img_proj")(f, c);
    x[0][static_cast<size_t>(c)] = acc + P("pos_emb")(0, c);
  }
  for (int t = 0; t < n - 1; ++t) {
    for (int c = 0; c < a.width; ++c) {
      double acc = 0.0;
      for (int e = 0; e < a.embed; ++e)
        acc += static_cast<double>(P("tok_emb")(toks[static_cast<size_t>(t)], e)) *
               P("in_proj")(e, c);
      x[static_cast<size_t>(t + 1)][static_cast<size_t>(c)] =
          acc + P("pos_emb")(t + 1, c);
    }
  }

  int hd = a.width / a.heads;
  auto rms_rows = [&](const std::vector<std::vector<double>>& m) {
    std::vector<std::vector<double>> out = m;
    for (auto& row : out) {
      double ms = 1e-6;
      for (double v : row) ms += v * v / static_cast<double>(row.size());
      // mean then eps, matching the op: mean(x^2) + eps
      ms = 0.0;
      for (double v : row) ms += v * v;
      ms = ms / static_cast<double>(row.size()) + 1e-6;
      double inv = 1.0 / std::sqrt(ms);
      for (double& v : row) v *= inv;
    }
    return out;
  };
  for (int layer = 0; layer < a.layers; ++layer) {
    std::string lp = "l" + std::to_string(layer) + "_";
    // attention over the row-normalized stream
    std::vector<std::vector<double>> xn = rms_rows(x);
    std::vector<std::vector<double>> attn(static_cast<size_t>(n),
                                          std::vector<double>(static_cast<size_t>(a.width), 0.0));
    for (int h = 0; h < a.heads; ++h) {
      std::string hp = lp + "h" + std::to_string(h) + "_";
      std::vector<std::vector<double>> q(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(hd))),
          k = q, v = q;
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < hd; ++c) {
          double aq = 0, ak = 0, av = 0;
          for (int w = 0; w < a.width; ++w) {
            double xv = xn[static_cast<size_t>(r)][static_cast<size_t>(w)];
            aq += xv * P(hp + "wq")(w, c);
            ak += xv * P(hp + "wk")(w, c);
            av += xv * P(hp + "wv")(w, c);
          }
          q[static_cast<size_t>(r)][static_cast<size_t>(c)] = aq;
          k[static_cast<size_t>(r)][static_cast<size_t>(c)] = ak;
          v[static_cast<size_t>(r)][static_cast<size_t>(c)] = av;
        }
      for (int r = 0; r < n; ++r) {
        std::vector<double> scores(static_cast<size_t>(r + 1));
        double mx = -1e300;
        for (int cpos = 0; cpos <= r; ++cpos) {
          double acc = 0;
          for (int c = 0; c < hd; ++c)
            acc += q[static_cast<size_t>(r)][static_cast<size_t>(c)] *
                   k[static_cast<size_t>(cpos)][static_cast<size_t>(c)];
          scores[static_cast<size_t>(cpos)] = acc / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, scores[static_cast<size_t>(cpos)]);
        }
        double z = 0;
        for (double& s : scores) {
          s = std::exp(s - mx);
          z += s;
        }
        for (double& s : scores) s /= z;
        for (int c = 0; c < hd; ++c) {
          double ctx = 0;
          for (int cpos = 0; cpos <= r; ++cpos)
            ctx += scores[static_cast<size_t>(cpos)] *
                   v[static_cast<size_t>(cpos)][static_cast<size_t>(c)];
          for (int w = 0; w < a.width; ++w)
            attn[static_cast<size_t>(r)][static_cast<size_t>(w)] +=
                ctx * P(hp + "wo")(c, w);
        }
      }
    }
    for (int r = 0; r < n; ++r)
      for (int w = 0; w < a.width; ++w)
        x[static_cast<size_t>(r)][static_cast<size_t>(w)] +=
            attn[static_cast<size_t>(r)][static_cast<size_t>(w)];
    // mlp over the row-normalized stream
    std::vector<std::vector<double>> xm = rms_rows(x);
    for (int r = 0; r < n; ++r) {
      std::vector<double> h(static_cast<size_t>(a.mlp_hidden));
      for (int c = 0; c < a.mlp_hidden; ++c) {
        double acc = P(lp + "mlp_b1")(0, c);
        for (int w = 0; w < a.width; ++w)
          acc += xm[static_cast<size_t>(r)][static_cast<size_t>(w)] * P(lp + "mlp_w1")(w, c);
        h[static_cast<size_t>(c)] = std::tanh(acc);
      }
      for (int w = 0; w < a.width; ++w) {
        double acc = P(lp + "mlp_b2")(0, w);
        for (int c = 0; c < a.mlp_hidden; ++c)
          acc += h[static_cast<size_t>(c)] * P(lp + "mlp_w2")(c, w);
        x[static_cast<size_t>(r)][static_cast<size_t>(w)] += acc;
      }
    }
  }

  std::vector<std::vector<double>> xf = rms_rows(x);
  for (int r = 0; r < n; ++r)
    for (int cv = 0; cv < a.vocab; ++cv) {
      double acc = P("head_b")(0, cv);
      for (int w = 0; w < a.width; ++w)
        acc += xf[static_cast<size_t>(r)][static_cast<size_t>(w)] * P("head_w")(w, cv);
      CHECK(static_cast<double>(got(r, cv)) == doctest::Approx(acc).epsilon(2e-3));
    }
}

TEST_CASE("sampling") {
  PolicyNet net = toy_net(13, 6, 6);
  Prompt prompt = toy_prompt(net, 3);
  SUBCASE("greedy mode ignores the seed") {
    Completion a = sample_answer(net, prompt, 0.0, 1);
    Completion b = sample_answer(net, prompt, 0.0, 999);
    CHECK(a.tokens == b.tokens);
  }
  SUBCASE("same seed, same completion; logprobs non-positive") {
    Completion a = sample_answer(net, prompt, 1.0, 42);
    Completion b = sample_answer(net, prompt, 1.0, 42);
    CHECK(a.tokens == b.tokens);
    CHECK(a.logprobs == b.logprobs);
    CHECK(static_cast<int>(a.tokens.size()) <= net.arch.max_answer);
    for (double lp : a.logprobs) CHECK(lp <= 0.0);
  }
  SUBCASE("recorded logprobs add up to the recomputed sequence logprob") {
    for (uint64_t s = 0; s < 30; ++s) {
      Completion c = sample_answer(net, prompt, 1.0, s);
      double recomputed = sequence_logprob(net, prompt, c.tokens);
      CHECK(recomputed == doctest::Approx(c.total_logprob()).epsilon(1e-5));
    }
  }
  SUBCASE("group sampling equals independent per-stream sampling") {
    auto group = sample_group(net, prompt, 4, 1.0, 17);
    REQUIRE(group.size() == 4);
    for (int g = 0; g < 4; ++g) {
      Completion solo =
          sample_answer(net, prompt, 1.0, mix64(17, static_cast<uint64_t>(g), 0x475250));
      CHECK(group[static_cast<size_t>(g)].tokens == solo.tokens);
    }
  }
  SUBCASE("first-token frequencies follow softmax(logits / T)") {
    PolicyNet tiny = toy_net(19, 6, 1);  // single-token completions
    Prompt p = toy_prompt(tiny, 5);
    const double temp = 1.3;
    Mat logits = forward_logits(tiny, p, {});
    Eigen::Index last = logits.rows() - 1;
    std::vector<double> expc(static_cast<size_t>(tiny.arch.vocab));
    double mx = -1e300, z = 0;
    for (int c = 0; c < tiny.arch.vocab; ++c)
      mx = std::max(mx, static_cast<double>(logits(last, c)) / temp);
    for (int c = 0; c < tiny.arch.vocab; ++c) {
      expc[static_cast<size_t>(c)] =
          std::exp(static_cast<double>(logits(last, c)) / temp - mx);
      z += expc[static_cast<size_t>(c)];
    }
    for (double& e : expc) e /= z;

    const int n = 10000;
    std::vector<int> counts(static_cast<size_t>(tiny.arch.vocab), 0);
    for (uint64_t s = 0; s < n; ++s)
      counts[static_cast<size_t>(sample_answer(tiny, p, temp, s).tokens[0])]++;
    for (int c = 0; c < tiny.arch.vocab; ++c) {
      double freq = counts[static_cast<size_t>(c)] / static_cast<double>(n);
      double sigma = std::sqrt(expc[static_cast<size_t>(c)] *
                               (1 - expc[static_cast<size_t>(c)]) / n);
      CHECK(std::abs(freq - expc[static_cast<size_t>(c)]) < 3 * sigma + 1e-4);
    }
  }
}

TEST_CASE("completion tree probabilities sum to one on a toy vocabulary") {
  PolicyNet net = toy_net(23, 4, 2);  // vocab 4, cap 2, eos 1
  Prompt prompt = toy_prompt(net, 11);
  double total = 0.0;
  for (int t1 = 0; t1 < net.arch.vocab; ++t1) {
    if (t1 == net.arch.eos_id) {
      total += std::exp(sequence_logprob(net, prompt, {t1}));
      continue;
    }
    for (int t2 = 0; t2 < net.arch.vocab; ++t2)
      total += std::exp(sequence_logprob(net, prompt, {t1, t2}));
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("softmax rows of the answer distribution are normalized") {
  PolicyNet net = toy_net(29, 6, 4);
  Prompt prompt = toy_prompt(net, 13);
  Mat logits = forward_logits(net, prompt, {2, 4});
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    double z = 0, mx = -1e300;
    for (int c = 0; c < net.arch.vocab; ++c)
      mx = std::max(mx, static_cast<double>(logits(r, c)));
    for (int c = 0; c < net.arch.vocab; ++c)
      z += std::exp(static_cast<double>(logits(r, c)) - mx);
    double check = 0;
    for (int c = 0; c < net.arch.vocab; ++c)
      check += std::exp(static_cast<double>(logits(r, c)) - mx) / z;
    CHECK(std::abs(check - 1.0) < 1e-6);
  }
}

TEST_CASE("extract_answer on policy outputs") {
  const Vocab& v = Vocab::instance();
  CHECK(extract_answer(v.encode("THINK see round /THINK ANS 3 /ANS EOS")) ==
        std::string("3"));
  CHECK(extract_answer(v.encode("ANS three /ANS")) == std::string("3"));
  CHECK(!extract_answer(v.encode("see round low EOS")).has_value());
  // idempotent and invariant under synonym perturbation
  auto t = world_item(31);
  for (uint64_t s = 0; s < 100; ++s) {
    auto perturbed = grade::perturb_synonym(t.answer, s, 0.5);
    CHECK(extract_answer(perturbed) == extract_answer(t.answer));
    CHECK(extract_answer(perturbed) == extract_answer(perturbed));
  }
}

TEST_CASE("context overflow raises a data error") {
  PolicyNet net = toy_net(37, 6, 2);
  Prompt prompt = toy_prompt(net, 1);
  std::vector<int> huge(static_cast<size_t>(net.arch.max_ctx + 1), 2);
  CHECK_THROWS_AS(forward_logits(net, prompt, huge), DataError);
}

TEST_CASE("sequence logprob gradients match finite differences") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    PolicyArch arch = toy_arch(5, 4, 4);
    PolicyNetT<double> net = init_policy_net(arch, seed).cast<double>();
    // nonzero head for a nontrivial softmax
    Rng rng(mix64(seed, 0x99));
    auto& hw = net.params["head_w"];
    for (Eigen::Index r = 0; r < hw.rows(); ++r)
      for (Eigen::Index c = 0; c < hw.cols(); ++c)
        hw(r, c) = rng.normal() * 0.5;

    std::vector<BatchItemT<double>> items(2);
    for (int i = 0; i < 2; ++i) {
      items[static_cast<size_t>(i)].img = nn::MatX<double>::Zero(1, 4);
      for (int f = 0; f < 4; ++f)
        items[static_cast<size_t>(i)].img(0, f) = rng.normal();
      items[static_cast<size_t>(i)].question = {2, 3};
      items[static_cast<size_t>(i)].answer = {4, 2, 1};
    }
    auto build = [&](nn::Tape<double>& tape, const nn::ParamSetT<double>& p) {
      PolicyNetT<double> n{p, arch};
      return nn::scale(nn::sum(answer_logprob_graph(tape, n, items)), -0.5);
    };
    nn::LossProbe<double> probe;
    probe.loss = [&](const nn::ParamSetT<double>& p) {
      nn::Tape<double> t;
      return build(t, p).scalar();
    };
    probe.grad = [&](const nn::ParamSetT<double>& p) {
      nn::Tape<double> t;
      auto l = build(t, p);
      t.backward(l);
      return t.named_grads();
    };
    CHECK(nn::finite_diff_check<double>(net.params, probe, 1e-4, 25) < 1e-4);
  }
}
