#include "genloop/policy.hpp"

#include <cmath>
#include <sstream>

namespace genloop::policy {

using namespace genloop::world;
using namespace genloop::nn;

std::string PolicyArch::describe() const {
  std::ostringstream out;
  out << "policy:v=" << vocab << ";f=" << img_feat << ";it=" << img_tokens
      << ";if=" << img_attr_feat << ";e=" << embed << ";w=" << width
      << ";h=" << heads << ";l=" << layers << ";m=" << mlp_hidden
      << ";a=" << max_answer << ";c=" << max_ctx << ";eos=" << eos_id;
  return out.str();
}

PolicyArch PolicyArch::parse(const std::string& desc) {
  if (desc.rfind("policy:", 0) != 0)
    throw DataError("not a policy architecture descriptor: " + desc);
  PolicyArch a;
  std::istringstream in(desc.substr(7));
  std::string kv;
  while (std::getline(in, kv, ';')) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw DataError("bad descriptor field: " + kv);
    std::string key = kv.substr(0, eq);
    int value = std::stoi(kv.substr(eq + 1));
    if (key == "v") a.vocab = value;
    else if (key == "f") a.img_feat = value;
    else if (key == "it") a.img_tokens = value;
    else if (key == "if") a.img_attr_feat = value;
    else if (key == "e") a.embed = value;
    else if (key == "w") a.width = value;
    else if (key == "h") a.heads = value;
    else if (key == "l") a.layers = value;
    else if (key == "m") a.mlp_hidden = value;
    else if (key == "a") a.max_answer = value;
    else if (key == "c") a.max_ctx = value;
    else if (key == "eos") a.eos_id = value;
    else throw DataError("unknown descriptor field: " + key);
  }
  return a;
}

Mat policy_image_features(const SynthImage& img) {
  Mat f = Mat::Zero(1, kPolicyImgFeat);
  int off = 0;
  int count = static_cast<int>(img.findings.size());
  f(0, off + std::clamp(count - 1, 0, 5)) = 1.0f;
  off += 6;
  for (int k = 0; k < 6; ++k) {
    int state = 0;  // none
    if (k < count) state = 1 + static_cast<int>(img.findings[static_cast<size_t>(k)].shape);
    f(0, off + k * 5 + state) = 1.0f;
    }
  off += 30;
  const Finding& big = img.largest();
  f(0, off + static_cast<int>(big.shape)) = 1.0f;
  off += 4;
  f(0, off + static_cast<int>(big.intensity)) = 1.0f;
  off += 3;
  f(0, off + static_cast<int>(big.size)) = 1.0f;
  off += 2;
  int quad = (big.row >= kGridSide / 2 ? 2 : 0) + (big.col >= kGridSide / 2 ? 1 : 0);
  f(0, off + quad) = 1.0f;
  off += 4;
  f(0, off + big.row) = 1.0f;
  off += kGridSide;
  f(0, off + big.col) = 1.0f;
  off += kGridSide;
  for (int attr = 0; attr < kNumAttrs; ++attr) {
    for (const Finding& fd : img.findings)
      if (finding_has_attr(fd, attr)) {
        f(0, off + attr) = 1.0f;
        break;
      }
  }
  off += kNumAttrs;
  f(0, off + static_cast<int>(img.modality)) = 1.0f;
  return f;
}

PolicyNet init_policy_net(uint64_t seed) {
  PolicyArch a;
  a.vocab = Vocab::instance().size();
  a.img_feat = kPolicyImgFeat;
  a.img_tokens = kNumAttrs;
  a.img_attr_feat = kPolicyAttrFeat;
  a.eos_id = Vocab::instance().eos();
  return init_policy_net(a, seed);
}

Mat policy_attr_tokens(const SynthImage& img) {
  Mat rows = Mat::Zero(kNumAttrs, kPolicyAttrFeat);
  for (int attr = 0; attr < kNumAttrs; ++attr) {
    rows(attr, attr) = 1.0f;
    float bit = -1.0f;
    for (const Finding& fd : img.findings)
      if (finding_has_attr(fd, attr)) {
        bit = 1.0f;
        break;
      }
    rows(attr, kNumAttrs) = bit;
  }
  return rows;
}

PolicyNet init_policy_net(const PolicyArch& a, uint64_t seed) {
  if (a.vocab <= 0 || a.img_feat <= 0 || a.width % a.heads != 0)
    throw ConfigError("policy architecture is malformed");
  PolicyNet net;
  net.arch = a;
  ParamSet& p = net.params;
  Rng rng(mix64(seed, 0x504f4c));

  auto fill = [&](Mat& m, double sd) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        m(r, c) = static_cast<float>(rng.normal() * sd);
  };
  auto dense = [&](const std::string& name, int rows, int cols, double sd) {
    Mat& m = p.add(name, rows, cols);
    if (sd > 0) fill(m, sd);
  };

  dense("tok_emb", a.vocab, a.embed, 0.5);
  dense("in_proj", a.embed, a.width, 1.0 / std::sqrt(a.embed));
  dense("img_proj", a.img_feat, a.width, 1.0 / std::sqrt(a.img_feat));
  if (a.img_tokens > 0)
    dense("imgattr_proj", a.img_attr_feat, a.width, 1.0 / std::sqrt(a.img_attr_feat));
  dense("pos_emb", a.max_ctx, a.width, 0.1);
  int hd = a.width / a.heads;
  for (int l = 0; l < a.layers; ++l) {
    std::string lp = "l" + std::to_string(l) + "_";
    for (int h = 0; h < a.heads; ++h) {
      std::string hp = lp + "h" + std::to_string(h) + "_";
      dense(hp + "wq", a.width, hd, 1.0 / std::sqrt(a.width));
      dense(hp + "wk", a.width, hd, 1.0 / std::sqrt(a.width));
      dense(hp + "wv", a.width, hd, 1.0 / std::sqrt(a.width));
      // residual-branch outputs start small to keep the stack well-scaled
      dense(hp + "wo", hd, a.width, 0.5 / std::sqrt(hd * a.layers * a.heads));
    }
    dense(lp + "mlp_w1", a.width, a.mlp_hidden, 1.0 / std::sqrt(a.width));
    dense(lp + "mlp_b1", 1, a.mlp_hidden, 0.0);
    dense(lp + "mlp_w2", a.mlp_hidden, a.width, 0.5 / std::sqrt(a.mlp_hidden * a.layers));
    dense(lp + "mlp_b2", 1, a.width, 0.0);
  }
  // zero head: the untrained policy is exactly uniform over the vocabulary
  dense("head_w", a.width, a.vocab, 0.0);
  dense("head_b", 1, a.vocab, 0.0);
  return net;
}

Prompt make_prompt(const SynthImage& img, const Question& q) {
  return Prompt{policy_image_features(img), policy_attr_tokens(img), q.tokens};
}

Prompt make_prompt(const VqaTriplet& t) {
  return make_prompt(t.image, t.question);
}

Mat forward_logits(const PolicyNet& net, const Prompt& prompt,
                   const std::vector<int>& answer_prefix) {
  Tape<float> tape;
  std::vector<int> toks = prompt.question;
  toks.insert(toks.end(), answer_prefix.begin(), answer_prefix.end());
  detail::ContextLayout layout;
  Var<float> x = detail::context_graph<float>(tape, net, {prompt.img},
                                              {prompt.attr}, {toks}, layout);
  Var<float> head_w = tape.leaf(net.params["head_w"], "head_w");
  Var<float> head_b = tape.leaf(net.params["head_b"], "head_b");
  return add_rowvec(matmul(x, head_w), head_b).value();
}

namespace {

// double-precision log-softmax of one logits row
std::vector<double> row_log_softmax(const Mat& logits, Eigen::Index row) {
  const Eigen::Index n = logits.cols();
  double mx = -1e300;
  for (Eigen::Index c = 0; c < n; ++c)
    mx = std::max(mx, static_cast<double>(logits(row, c)));
  double z = 0.0;
  for (Eigen::Index c = 0; c < n; ++c)
    z += std::exp(static_cast<double>(logits(row, c)) - mx);
  double lz = std::log(z);
  std::vector<double> out(static_cast<size_t>(n));
  for (Eigen::Index c = 0; c < n; ++c)
    out[static_cast<size_t>(c)] = static_cast<double>(logits(row, c)) - mx - lz;
  return out;
}

}  // namespace

Completion sample_answer(const PolicyNet& net, const Prompt& prompt,
                         double temperature, uint64_t seed) {
  if (temperature < 0.0) throw ConfigError("sample_answer: negative temperature");
  Completion out;
  Rng rng(mix64(seed, 0x534d50));
  while (static_cast<int>(out.tokens.size()) < net.arch.max_answer) {
    Mat logits = forward_logits(net, prompt, out.tokens);
    Eigen::Index last = logits.rows() - 1;
    std::vector<double> logp = row_log_softmax(logits, last);

    int chosen;
    if (temperature == 0.0) {
      chosen = 0;
      for (int c = 1; c < net.arch.vocab; ++c)
        if (logits(last, c) > logits(last, chosen)) chosen = c;
    } else {
      // draw from softmax(logits / T); recorded log-prob stays at T = 1
      std::vector<double> tl(static_cast<size_t>(net.arch.vocab));
      double mx = -1e300;
      for (int c = 0; c < net.arch.vocab; ++c) {
        tl[static_cast<size_t>(c)] =
            static_cast<double>(logits(last, c)) / temperature;
        mx = std::max(mx, tl[static_cast<size_t>(c)]);
      }
      double z = 0.0;
      for (double& v : tl) {
        v = std::exp(v - mx);
        z += v;
      }
      double u = rng.uniform() * z;
      chosen = net.arch.vocab - 1;
      double acc = 0.0;
      for (int c = 0; c < net.arch.vocab; ++c) {
        acc += tl[static_cast<size_t>(c)];
        if (u < acc) {
          chosen = c;
          break;
        }
      }
    }
    out.tokens.push_back(chosen);
    out.logprobs.push_back(logp[static_cast<size_t>(chosen)]);
    if (chosen == net.arch.eos_id) {
      out.terminated = true;
      break;
    }
  }
  return out;
}

std::vector<Completion> sample_group(const PolicyNet& net, const Prompt& prompt,
                                     int group, double temperature, uint64_t seed) {
  if (group < 1) throw ConfigError("sample_group: group size must be positive");
  std::vector<Completion> out;
  out.reserve(static_cast<size_t>(group));
  for (int g = 0; g < group; ++g)
    out.push_back(sample_answer(net, prompt, temperature,
                                mix64(seed, static_cast<uint64_t>(g), 0x475250)));
  return out;
}

double sequence_logprob(const PolicyNet& net, const Prompt& prompt,
                        const std::vector<int>& answer) {
  if (answer.empty()) return 0.0;
  Tape<float> tape;
  std::vector<BatchItem> items(1);
  items[0].img = prompt.img;
  items[0].attr = prompt.attr;
  items[0].question = prompt.question;
  items[0].answer = answer;
  Var<float> lp = answer_logprob_graph(tape, net, items);
  return lp.value().cast<double>().sum();
}

}  // namespace genloop::policy
