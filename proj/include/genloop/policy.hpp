#pragma once

// Autoregressive answer policy: token embedding plus an image-feature
// projection feeding a small causal self-attention stack with an output
// head over the closed vocabulary. One taped forward implementation serves
// sampling, scoring and training, so all paths agree bit-for-bit.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "genloop/nn.hpp"
#include "genloop/world.hpp"

namespace genloop::policy {

struct PolicyArch {
  int vocab = 0;
  int img_feat = 0;       // general image token
  int img_tokens = 0;     // extra attribute tokens in the image prefix
  int img_attr_feat = 0;  // feature width of each attribute token
  int embed = 32;
  int width = 64;
  int heads = 2;
  int layers = 2;
  int mlp_hidden = 128;
  int max_answer = world::kMaxAnswerLen;
  int max_ctx = 48;
  int eos_id = 0;

  int prefix_rows() const { return 1 + img_tokens; }

  std::string describe() const;
  static PolicyArch parse(const std::string& desc);
};

template <class T>
struct PolicyNetT {
  nn::ParamSetT<T> params;
  PolicyArch arch;

  template <class U>
  PolicyNetT<U> cast() const {
    return PolicyNetT<U>{params.template cast<U>(), arch};
  }
};

using PolicyNet = PolicyNetT<float>;

// Engineered image features for the policy conditioning vector: finding
// count, shapes by reading position, attributes plus exact cell of the
// largest finding and its quadrant, per-attribute presence bits, and the
// modality.
constexpr int kPolicyImgFeat = 6 + 6 * 5 +
                               (4 + 3 + 2 + 4 + 2 * world::kGridSide) +
                               world::kNumAttrs + world::kNumModalities;
nn::Mat policy_image_features(const world::SynthImage& img);

// One row per attribute: its identity one-hot and a +/-1 presence bit, so
// a single attention head can answer presence questions by token match.
constexpr int kPolicyAttrFeat = world::kNumAttrs + 1;
nn::Mat policy_attr_tokens(const world::SynthImage& img);

// World-vocabulary policy with the default architecture. The output head
// starts at zero, so an untrained net is exactly uniform over the vocabulary.
PolicyNet init_policy_net(uint64_t seed);
PolicyNet init_policy_net(const PolicyArch& arch, uint64_t seed);

struct Prompt {
  nn::Mat img;                // [1, arch.img_feat]
  nn::Mat attr;               // [arch.img_tokens, arch.img_attr_feat] (may be empty)
  std::vector<int> question;  // token ids
};

Prompt make_prompt(const world::SynthImage& img, const world::Question& q);
Prompt make_prompt(const world::VqaTriplet& t);

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

template <class T>
struct BatchItemT {
  nn::MatX<T> img;            // [1, img_feat]
  nn::MatX<T> attr;           // [img_tokens, img_attr_feat] (may be empty)
  std::vector<int> question;
  std::vector<int> answer;    // tokens whose conditionals are wanted
};
using BatchItem = BatchItemT<float>;

// Per-token conditional log-probabilities of every item's answer tokens,
// stacked as a [total_answer_tokens, 1] column in item order. `spans`
// receives (offset, length) per item when non-null.
template <class T>
nn::Var<T> answer_logprob_graph(nn::Tape<T>& tape, const PolicyNetT<T>& net,
                                const std::vector<BatchItemT<T>>& items,
                                std::vector<std::pair<int, int>>* spans = nullptr);

// Logits for every context position (image slot, question, answer prefix).
nn::Mat forward_logits(const PolicyNet& net, const Prompt& prompt,
                       const std::vector<int>& answer_prefix);

struct Completion {
  std::vector<int> tokens;        // includes EOS when terminated by it
  std::vector<double> logprobs;   // model log-probs of each sampled token
  bool terminated = false;        // EOS seen (false = length cap)

  double total_logprob() const {
    double s = 0.0;
    for (double l : logprobs) s += l;
    return s;
  }
};

// Ancestral sampling until EOS or the answer cap; temperature 0 is greedy
// argmax. Recorded log-probs are always the model's (temperature 1).
Completion sample_answer(const PolicyNet& net, const Prompt& prompt,
                         double temperature, uint64_t seed);

// G independent streams with per-stream derived seeds; identical to G
// sequential sample_answer calls.
std::vector<Completion> sample_group(const PolicyNet& net, const Prompt& prompt,
                                     int group, double temperature, uint64_t seed);

double sequence_logprob(const PolicyNet& net, const Prompt& prompt,
                        const std::vector<int>& answer);

// Normalized value of the unique answer span (INVALID -> nullopt).
inline std::optional<std::string> extract_answer(const std::vector<int>& tokens) {
  return world::extract_value(tokens);
}

// ---------------------------------------------------------------------------
// Graph construction (templated so gradient oracles can run in double)
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
nn::MatX<T> causal_mask(int n) {
  nn::MatX<T> m = nn::MatX<T>::Zero(n, n);
  for (int r = 0; r < n; ++r)
    for (int c = r + 1; c < n; ++c) m(r, c) = static_cast<T>(-1e9);
  return m;
}

struct ContextLayout {
  std::vector<int> offsets;
  std::vector<int> lengths;
  int total = 0;
};

// Hidden states for a batch of image-prefix + tokens sequences, stacked by
// rows. Each sequence is [IMG][ATTR...][question][answer...].
template <class T>
nn::Var<T> context_graph(nn::Tape<T>& tape, const PolicyNetT<T>& net,
                         const std::vector<nn::MatX<T>>& imgs,
                         const std::vector<nn::MatX<T>>& attrs,
                         const std::vector<std::vector<int>>& tokens,
                         ContextLayout& layout) {
  using namespace genloop::nn;
  const PolicyArch& a = net.arch;
  const int batch = static_cast<int>(imgs.size());
  if (batch == 0) throw ConfigError("policy forward: empty batch");

  layout.offsets.clear();
  layout.lengths.clear();
  layout.total = 0;
  std::vector<int> tok_all;
  std::vector<int> positions;
  for (int i = 0; i < batch; ++i) {
    if (imgs[static_cast<size_t>(i)].rows() != 1 ||
        imgs[static_cast<size_t>(i)].cols() != a.img_feat)
      throw ConfigError("policy forward: image feature shape mismatch");
    if (a.img_tokens > 0 &&
        (attrs[static_cast<size_t>(i)].rows() != a.img_tokens ||
         attrs[static_cast<size_t>(i)].cols() != a.img_attr_feat))
      throw ConfigError("policy forward: attribute token shape mismatch");
    int n = a.prefix_rows() + static_cast<int>(tokens[static_cast<size_t>(i)].size());
    if (n > a.max_ctx)
      throw DataError("policy forward: context overflow (" + std::to_string(n) +
                      " > " + std::to_string(a.max_ctx) + ")");
    for (int tok : tokens[static_cast<size_t>(i)]) {
      if (tok < 0 || tok >= a.vocab)
        throw DataError("policy forward: token id out of vocabulary");
      tok_all.push_back(tok);
    }
    layout.offsets.push_back(layout.total);
    layout.lengths.push_back(n);
    for (int p = 0; p < n; ++p) positions.push_back(p);
    layout.total += n;
  }

  Var<T> tok_emb = tape.leaf(net.params["tok_emb"], "tok_emb");
  Var<T> in_proj = tape.leaf(net.params["in_proj"], "in_proj");
  Var<T> img_proj = tape.leaf(net.params["img_proj"], "img_proj");
  Var<T> pos_emb = tape.leaf(net.params["pos_emb"], "pos_emb");

  nn::MatX<T> img_stack(batch, a.img_feat);
  for (int i = 0; i < batch; ++i)
    img_stack.row(i) = imgs[static_cast<size_t>(i)].row(0);
  Var<T> img_rows = matmul(tape.constant(img_stack), img_proj);  // [B, width]

  Var<T> attr_rows;  // [B * img_tokens, width]
  if (a.img_tokens > 0) {
    Var<T> attr_proj = tape.leaf(net.params["imgattr_proj"], "imgattr_proj");
    nn::MatX<T> attr_stack(batch * a.img_tokens, a.img_attr_feat);
    for (int i = 0; i < batch; ++i)
      attr_stack.middleRows(i * a.img_tokens, a.img_tokens) =
          attrs[static_cast<size_t>(i)];
    attr_rows = matmul(tape.constant(attr_stack), attr_proj);
  }

  Var<T> tok_rows;  // [total tokens, width]
  if (!tok_all.empty())
    tok_rows = matmul(gather_rows(tok_emb, tok_all), in_proj);

  std::vector<Var<T>> parts;
  int tok_off = 0;
  for (int i = 0; i < batch; ++i) {
    parts.push_back(gather_rows(img_rows, {i}));
    if (a.img_tokens > 0) {
      std::vector<int> arange(static_cast<size_t>(a.img_tokens));
      for (int j = 0; j < a.img_tokens; ++j)
        arange[static_cast<size_t>(j)] = i * a.img_tokens + j;
      parts.push_back(gather_rows(attr_rows, arange));
    }
    int nt = layout.lengths[static_cast<size_t>(i)] - a.prefix_rows();
    if (nt > 0) {
      std::vector<int> range(static_cast<size_t>(nt));
      for (int j = 0; j < nt; ++j) range[static_cast<size_t>(j)] = tok_off + j;
      parts.push_back(gather_rows(tok_rows, range));
      tok_off += nt;
    }
  }
  Var<T> x = add(concat_rows(parts), gather_rows(pos_emb, positions));

  const T att_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(
                          a.width / a.heads)));
  for (int layer = 0; layer < a.layers; ++layer) {
    std::string lp = "l" + std::to_string(layer) + "_";
    // one leaf per parameter per tape: gradients from every item accumulate
    std::vector<Var<T>> wq, wk, wv, wo;
    for (int h = 0; h < a.heads; ++h) {
      std::string hp = lp + "h" + std::to_string(h) + "_";
      wq.push_back(tape.leaf(net.params[hp + "wq"], hp + "wq"));
      wk.push_back(tape.leaf(net.params[hp + "wk"], hp + "wk"));
      wv.push_back(tape.leaf(net.params[hp + "wv"], hp + "wv"));
      wo.push_back(tape.leaf(net.params[hp + "wo"], hp + "wo"));
    }
    std::vector<Var<T>> attn_parts;
    for (int i = 0; i < batch; ++i) {
      int n = layout.lengths[static_cast<size_t>(i)];
      std::vector<int> range(static_cast<size_t>(n));
      for (int j = 0; j < n; ++j)
        range[static_cast<size_t>(j)] = layout.offsets[static_cast<size_t>(i)] + j;
      Var<T> xs = rms_norm_rows(gather_rows(x, range));
      nn::MatX<T> mask = causal_mask<T>(n);
      Var<T> acc;
      for (int h = 0; h < a.heads; ++h) {
        Var<T> q = matmul(xs, wq[static_cast<size_t>(h)]);
        Var<T> k = matmul(xs, wk[static_cast<size_t>(h)]);
        Var<T> v = matmul(xs, wv[static_cast<size_t>(h)]);
        Var<T> scores = scale(matmul(q, k, false, true), att_scale);
        Var<T> probs = softmax_rows(scores, mask);
        Var<T> ctx = matmul(probs, v);
        Var<T> out = matmul(ctx, wo[static_cast<size_t>(h)]);
        acc = (h == 0) ? out : add(acc, out);
      }
      attn_parts.push_back(acc);
    }
    x = add(x, concat_rows(attn_parts));

    Var<T> w1 = tape.leaf(net.params[lp + "mlp_w1"], lp + "mlp_w1");
    Var<T> b1 = tape.leaf(net.params[lp + "mlp_b1"], lp + "mlp_b1");
    Var<T> w2 = tape.leaf(net.params[lp + "mlp_w2"], lp + "mlp_w2");
    Var<T> b2 = tape.leaf(net.params[lp + "mlp_b2"], lp + "mlp_b2");
    Var<T> h = tanh(add_rowvec(matmul(rms_norm_rows(x), w1), b1));
    x = add(x, add_rowvec(matmul(h, w2), b2));
  }
  return rms_norm_rows(x);
}

}  // namespace detail

template <class T>
nn::Var<T> answer_logprob_graph(nn::Tape<T>& tape, const PolicyNetT<T>& net,
                                const std::vector<BatchItemT<T>>& items,
                                std::vector<std::pair<int, int>>* spans) {
  using namespace genloop::nn;
  if (items.empty()) throw ConfigError("answer_logprob_graph: empty batch");
  std::vector<nn::MatX<T>> imgs;
  std::vector<nn::MatX<T>> attrs;
  std::vector<std::vector<int>> tokens;
  for (const auto& item : items) {
    if (item.answer.empty())
      throw ConfigError("answer_logprob_graph: item without answer tokens");
    std::vector<int> toks = item.question;
    toks.insert(toks.end(), item.answer.begin(), item.answer.end() - 1);
    imgs.push_back(item.img);
    attrs.push_back(item.attr);
    tokens.push_back(std::move(toks));
  }
  detail::ContextLayout layout;
  Var<T> x = detail::context_graph(tape, net, imgs, attrs, tokens, layout);

  std::vector<int> sel;
  std::vector<int> targets;
  if (spans) spans->clear();
  const int prefix = net.arch.prefix_rows();
  for (size_t i = 0; i < items.size(); ++i) {
    int qlen = static_cast<int>(items[i].question.size());
    int alen = static_cast<int>(items[i].answer.size());
    if (spans) spans->emplace_back(static_cast<int>(sel.size()), alen);
    for (int j = 0; j < alen; ++j) {
      sel.push_back(layout.offsets[i] + prefix - 1 + qlen + j);
      targets.push_back(items[i].answer[static_cast<size_t>(j)]);
    }
  }

  Var<T> head_w = tape.leaf(net.params["head_w"], "head_w");
  Var<T> head_b = tape.leaf(net.params["head_b"], "head_b");
  Var<T> logits = add_rowvec(matmul(gather_rows(x, sel), head_w), head_b);
  Var<T> logp = log_softmax_rows(logits);

  nn::MatX<T> pick = nn::MatX<T>::Zero(logp.rows(), logp.cols());
  for (size_t r = 0; r < targets.size(); ++r)
    pick(static_cast<Eigen::Index>(r), targets[r]) = T(1);
  return row_sum(cmul(logp, pick));  // [total answer tokens, 1]
}

}  // namespace genloop::policy
