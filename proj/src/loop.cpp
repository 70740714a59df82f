#include "genloop/loop.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "genloop/checkpoint.hpp"
#include "genloop/metrics.hpp"

namespace genloop::loop {

namespace fs = std::filesystem;
using namespace genloop::world;
using nlohmann::json;

void LoopConfig::validate() const {
  if (iterations < 1) throw ConfigError("loop iterations must be at least 1");
  if (candidates <= 0) throw ConfigError("candidate count must be positive");
  if (tau <= rm::kScoreLow || tau >= rm::kScoreLow + rm::kScoreRange)
    throw ConfigError("tau must lie inside the reward score range");
  if (seed_corpus <= 0 || val_size <= 0 || grade_pool <= 0 || grade_per_class <= 0)
    throw ConfigError("loop corpus sizes must be positive");
  if (pref_samples < 0) throw ConfigError("pref_samples must be non-negative");
  world::validate_mixture(mixture);
  sft.validate();
  grpo.validate();
}

std::string LoopConfig::describe() const {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "loop:T=%d;n=%d;tau=%.9g;overlap=%d;seed_corpus=%d;val=%d;"
                "gpool=%d;gclass=%d;pref=%d;eta=%.9g;scratch=%d;"
                "sft=%d/%d/%.9g;grpo=%d/%d/%.9g/%.9g/%.9g/%.9g/%.9g;"
                "rmi=%d/%.9g;rmu=%d/%.9g;master=%llu",
                iterations, candidates, tau, allow_overlap ? 1 : 0, seed_corpus,
                val_size, grade_pool, grade_per_class, pref_samples, gen_eta,
                sft_from_scratch ? 1 : 0, sft.epochs, sft.batch, sft.lr,
                grpo.steps, grpo.group, grpo.lr, grpo.clip, grpo.kl_coef,
                grpo.alpha, grpo.beta, rm_init.epochs, rm_init.lr,
                rm_update.epochs, rm_update.lr,
                static_cast<unsigned long long>(master_seed));
  return buf;
}

LoopConfig loop_config_from(const config::Config& cfg) {
  LoopConfig out;
  out.iterations = static_cast<int>(cfg.get_int("loop.iterations", out.iterations));
  out.candidates = static_cast<int>(cfg.get_int("loop.candidates", out.candidates));
  out.tau = cfg.get_real("loop.tau", out.tau);
  out.allow_overlap = cfg.get_bool("loop.allow_overlap", out.allow_overlap);
  out.seed_corpus = static_cast<int>(cfg.get_int("loop.seed_corpus", out.seed_corpus));
  out.val_size = static_cast<int>(cfg.get_int("loop.val_size", out.val_size));
  out.grade_pool = static_cast<int>(cfg.get_int("loop.grade_pool", out.grade_pool));
  out.grade_per_class =
      static_cast<int>(cfg.get_int("loop.grade_per_class", out.grade_per_class));
  out.pref_samples =
      static_cast<int>(cfg.get_int("loop.pref_samples", out.pref_samples));
  out.gen_eta = cfg.get_real("loop.gen_eta", out.gen_eta);
  out.sft_from_scratch = cfg.get_bool("loop.sft_from_scratch", out.sft_from_scratch);
  out.sft.epochs = static_cast<int>(cfg.get_int("sft.epochs", out.sft.epochs));
  out.sft.batch = static_cast<int>(cfg.get_int("sft.batch", out.sft.batch));
  out.sft.lr = cfg.get_real("sft.lr", out.sft.lr);
  out.grpo.steps = static_cast<int>(cfg.get_int("grpo.steps", out.grpo.steps));
  out.grpo.group = static_cast<int>(cfg.get_int("grpo.group", out.grpo.group));
  out.grpo.prompts_per_step =
      static_cast<int>(cfg.get_int("grpo.prompts_per_step", out.grpo.prompts_per_step));
  out.grpo.lr = cfg.get_real("grpo.lr", out.grpo.lr);
  out.grpo.clip = cfg.get_real("grpo.clip", out.grpo.clip);
  out.grpo.kl_coef = cfg.get_real("grpo.kl_coef", out.grpo.kl_coef);
  out.grpo.alpha = cfg.get_real("grpo.alpha", out.grpo.alpha);
  out.grpo.beta = cfg.get_real("grpo.beta", out.grpo.beta);
  out.grpo.temperature = cfg.get_real("grpo.temperature", out.grpo.temperature);
  std::string mode = cfg.get_str("grpo.advantage_mode", "std");
  if (mode == "std") out.grpo.advantage_mode = trainers::AdvantageMode::Std;
  else if (mode == "mean_only") out.grpo.advantage_mode = trainers::AdvantageMode::MeanOnly;
  else throw ConfigError("grpo.advantage_mode must be std or mean_only");
  out.rm_init.epochs = static_cast<int>(cfg.get_int("rm.epochs", out.rm_init.epochs));
  out.rm_init.lr = cfg.get_real("rm.lr", out.rm_init.lr);
  out.rm_update.epochs =
      static_cast<int>(cfg.get_int("rm.update_epochs", out.rm_update.epochs));
  out.rm_update.lr = cfg.get_real("rm.update_lr", out.rm_update.lr);
  out.master_seed = cfg.get_u64("seed", out.master_seed);
  return out;
}

std::vector<size_t> filter_high(const std::vector<double>& scores, double tau) {
  std::vector<size_t> keep;
  for (size_t i = 0; i < scores.size(); ++i)
    if (scores[i] > tau) keep.push_back(i);  // strictly above: == tau drops
  return keep;
}

std::vector<size_t> dedup(const std::vector<gen::Candidate>& high,
                          const std::vector<size_t>& high_idx,
                          const std::vector<records::Record>& corpus) {
  std::set<std::string> seen;
  for (const auto& r : corpus)
    seen.insert(records::to_line(records::Record{
        r.image_seed, r.modality, r.task, r.template_id, "", r.answer_tokens,
        "", {}, {}, {}, {}, {}, {}}));
  std::vector<size_t> keep;
  for (size_t idx : high_idx) {
    const auto& t = high[idx].triplet;
    records::Record key_rec = records::make_record(t);
    key_rec.question_tokens.clear();
    key_rec.provenance.clear();
    std::string key = records::to_line(key_rec);
    if (!seen.count(key)) {
      seen.insert(key);
      keep.push_back(idx);
    }
  }
  return keep;
}

namespace {

constexpr uint64_t kSaltSeedSet = 0x5345;
constexpr uint64_t kSaltVal = 0x56414c;
constexpr uint64_t kSaltGrade = 0x4752;
constexpr uint64_t kSaltCand = 0x43414e;
constexpr uint64_t kSaltPref = 0x505246;

std::vector<VqaTriplet> oracle_items(uint64_t stream, int n,
                                     const std::vector<double>& mixture) {
  std::vector<VqaTriplet> out;
  const auto& templates = question_templates();
  std::set<std::string> used;
  uint64_t counter = 0;
  Rng rng(mix64(stream, 0x4954454d));
  while (static_cast<int>(out.size()) < n) {
    uint64_t img_seed = mix64(stream, 0x494d47, counter++);
    SynthImage img = sample_image(img_seed, mixture);
    int tid = rng.below_int(static_cast<int>(templates.size()));
    Question q = render_question(templates[static_cast<size_t>(tid)].task, tid, img);
    VqaTriplet t{img, q, oracle_answer(img, q), Provenance::Oracle};
    std::string key = item_key(t, false);
    if (used.count(key)) continue;
    used.insert(key);
    out.push_back(std::move(t));
  }
  return out;
}

std::string iter_dir(const std::string& run_dir, int t) {
  return run_dir + "/iter_" + std::to_string(t);
}

void write_metrics_csv(const std::string& path, const IterationMetrics& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write metrics csv: " + path);
  out << "iteration,corpus_size,candidates,admitted,mean_candidate_score,"
         "sft_loss,grpo_mean_reward,val_accuracy\n";
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%d,%d,%d,%d,%.6f,%.6f,%.6f,%.6f\n",
                m.iteration, m.corpus_size, m.candidates, m.admitted,
                m.mean_candidate_score, m.sft_loss, m.grpo_mean_reward,
                m.val_accuracy);
  out << buf;
}

void write_manifest(const std::string& dir, const LoopConfig& cfg, int iteration,
                    const std::vector<std::string>& files) {
  json j;
  j["iteration"] = iteration;
  j["config_hash"] = nn::string_crc32(cfg.describe());
  json checks = json::object();
  for (const auto& f : files) checks[f] = nn::file_crc32(dir + "/" + f);
  j["checksums"] = checks;
  std::ofstream out(dir + "/manifest.json", std::ios::trunc);
  if (!out) throw DataError("cannot write manifest in " + dir);
  out << j.dump(2) << '\n';
}

// Returns the manifest when the iteration directory is complete and every
// checksum matches; corrupted files raise IntegrityError.
std::optional<json> read_manifest(const std::string& dir, const LoopConfig& cfg) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) return std::nullopt;
  json j;
  try {
    in >> j;
  } catch (const json::exception&) {
    throw IntegrityError("unreadable manifest in " + dir);
  }
  if (j.at("config_hash").get<uint32_t>() != nn::string_crc32(cfg.describe()))
    throw ConfigError("run directory was produced under a different config: " + dir);
  for (const auto& [file, sum] : j.at("checksums").items()) {
    if (nn::file_crc32(dir + "/" + file) != sum.get<uint32_t>())
      throw IntegrityError("checksum mismatch for " + dir + "/" + file);
  }
  return j;
}

void persist_iteration(const std::string& run_dir, int t, const LoopConfig& cfg,
                       const LoopState& state,
                       const std::vector<records::Record>& high,
                       const std::vector<records::Record>& prefs,
                       const IterationMetrics& m) {
  std::string dir = iter_dir(run_dir, t);
  fs::create_directories(dir);
  records::write_records(dir + "/dgen.records", state.corpus);
  records::write_records(dir + "/dhigh.records", high);
  records::write_records(dir + "/dpref.records", prefs);
  nn::save_checkpoint(dir + "/policy.ckpt", state.policy_net.arch.describe(),
                      state.policy_net.params);
  nn::save_checkpoint(dir + "/rm.ckpt", state.reward_net.describe(),
                      state.reward_net.params);
  state.gen_state.save(dir + "/gen.state");
  write_metrics_csv(dir + "/metrics.csv", m);
  write_manifest(dir, cfg, t,
                 {"dgen.records", "dhigh.records", "dpref.records", "policy.ckpt",
                  "rm.ckpt", "gen.state", "metrics.csv"});
}

}  // namespace

std::vector<VqaTriplet> seed_triplets(const LoopConfig& cfg) {
  return oracle_items(mix64(cfg.master_seed, kSaltSeedSet), cfg.seed_corpus,
                      cfg.mixture);
}

std::vector<VqaTriplet> val_triplets(const LoopConfig& cfg) {
  return oracle_items(mix64(cfg.master_seed, kSaltVal), cfg.val_size, cfg.mixture);
}

std::vector<grade::GradedExample> graded_corpus(const LoopConfig& cfg) {
  auto pool = oracle_items(mix64(cfg.master_seed, kSaltGrade), cfg.grade_pool,
                           cfg.mixture);
  grade::GradeCounts counts{cfg.grade_per_class, cfg.grade_per_class,
                            cfg.grade_per_class, cfg.grade_per_class};
  return grade::build_graded_dataset(pool, counts, mix64(cfg.master_seed, 0x4743));
}

LoopState init_state(const LoopConfig& cfg) {
  cfg.validate();
  LoopState state;
  state.iteration = 0;
  state.gen_state = gen::GenState::uniform();
  state.policy_net = policy::init_policy_net(mix64(cfg.master_seed, 0x504f));
  state.reward_net = rm::init_reward_net(mix64(cfg.master_seed, 0x524d));

  rm::TrainRmConfig rm_cfg = cfg.rm_init;
  rm_cfg.seed = mix64(cfg.master_seed, 0x524d54);
  rm::train_rm(state.reward_net, graded_corpus(cfg), rm_cfg);

  auto seeds = seed_triplets(cfg);
  for (const auto& t : seeds) {
    records::Record r = records::make_record(t);
    r.admitted_iter = 0;
    state.corpus.push_back(std::move(r));
  }
  return state;
}

IterationOutput loop_iteration(LoopState& state, const LoopConfig& cfg) {
  const int t = state.iteration + 1;
  IterationOutput out;
  IterationMetrics& m = out.metrics;
  m.iteration = t;

  // generate and score candidates
  auto cands = gen::generate_candidates(
      state.gen_state, gen::default_profiles(), cfg.candidates,
      mix64(cfg.master_seed, static_cast<uint64_t>(t), kSaltCand));
  std::vector<double> scores;
  scores.reserve(cands.size());
  double score_sum = 0.0;
  for (const auto& c : cands) {
    double s = rm::score(state.reward_net, c.triplet);
    scores.push_back(s);
    score_sum += s;
  }
  m.candidates = static_cast<int>(cands.size());
  m.mean_candidate_score = cands.empty() ? 0.0 : score_sum / cands.size();

  // strict filter, then optional overlap removal
  std::vector<size_t> high_idx = filter_high(scores, cfg.tau);
  if (!cfg.allow_overlap) high_idx = dedup(cands, high_idx, state.corpus);

  std::vector<records::Record> high_records;
  for (size_t idx : high_idx) {
    records::Record r = records::make_record(cands[idx].triplet);
    r.strategy = gen::strategy_name(cands[idx].strategy);
    r.reward_score = scores[idx];
    r.admitted_iter = t;
    high_records.push_back(std::move(r));
  }
  m.admitted = static_cast<int>(high_records.size());
  state.corpus.insert(state.corpus.end(), high_records.begin(), high_records.end());
  m.corpus_size = static_cast<int>(state.corpus.size());

  // SFT over the accumulated corpus (warm start unless configured otherwise)
  std::vector<VqaTriplet> train;
  train.reserve(state.corpus.size());
  for (const auto& r : state.corpus) train.push_back(records::to_triplet(r));
  if (cfg.sft_from_scratch)
    state.policy_net = policy::init_policy_net(mix64(cfg.master_seed, 0x504f));
  trainers::SftConfig sft_cfg = cfg.sft;
  sft_cfg.seed = mix64(cfg.master_seed, static_cast<uint64_t>(t), 0x534654);
  auto sft_trace = trainers::run_sft(state.policy_net, train, sft_cfg);
  m.sft_loss = sft_trace.back();

  // RL stage against a frozen copy of the SFT checkpoint
  policy::PolicyNet ref = state.policy_net;
  trainers::GrpoConfig grpo_cfg = cfg.grpo;
  grpo_cfg.seed = mix64(cfg.master_seed, static_cast<uint64_t>(t), 0x4752504f);
  auto grpo_trace =
      trainers::run_grpo(state.policy_net, ref, state.reward_net, train, grpo_cfg);
  double reward_mean = 0.0;
  for (const auto& row : grpo_trace) reward_mean += row.mean_reward;
  m.grpo_mean_reward = grpo_trace.empty() ? 0.0 : reward_mean / grpo_trace.size();

  // preference records sampled from the updated policy
  std::vector<rm::PreferenceRecord> prefs;
  std::vector<records::Record> pref_records;
  Rng pref_rng(mix64(cfg.master_seed, static_cast<uint64_t>(t), kSaltPref));
  for (int i = 0; i < cfg.pref_samples; ++i) {
    const auto& src = train[static_cast<size_t>(pref_rng.below_int(
        static_cast<int>(train.size())))];
    policy::Completion c = policy::sample_answer(
        state.policy_net, policy::make_prompt(src), cfg.grpo.temperature,
        mix64(cfg.master_seed, static_cast<uint64_t>(t) << 24 | static_cast<uint64_t>(i),
              0x50524546));
    rm::PreferenceRecord p;
    p.triplet = src;
    p.triplet.answer = c.tokens;
    p.triplet.provenance = Provenance::Policy;
    p.target = rm::derive_pref_target(c.tokens, oracle_answer(src.image, src.question));
    p.iteration = t;
    prefs.push_back(p);

    records::Record r = records::make_record(p.triplet);
    r.target_score = p.target;
    r.admitted_iter = t;
    pref_records.push_back(std::move(r));
  }

  // reward model continual update with graded replay
  rm::TrainRmConfig up_cfg = cfg.rm_update;
  up_cfg.seed = mix64(cfg.master_seed, static_cast<uint64_t>(t), 0x524d55);
  state.reward_net =
      rm::continual_update(state.reward_net, prefs, graded_corpus(cfg), up_cfg);

  // generator update from this iteration's admitted samples
  std::vector<std::pair<int, double>> accepted;
  for (size_t idx : high_idx) accepted.emplace_back(cands[idx].cell, scores[idx]);
  state.gen_state = gen::self_update(state.gen_state, accepted, cfg.gen_eta);

  // held-out accuracy for the iteration trace
  auto val = val_triplets(cfg);
  m.val_accuracy = metrics::evaluate(state.policy_net, val).overall.accuracy;

  state.iteration = t;
  out.admitted = std::move(high_records);
  out.preferences = std::move(pref_records);
  return out;
}

LoopState load_iteration(const LoopConfig& cfg, const std::string& run_dir,
                         int iteration) {
  std::string dir = iter_dir(run_dir, iteration);
  auto manifest = read_manifest(dir, cfg);
  if (!manifest)
    throw DataError("no completed iteration " + std::to_string(iteration) +
                    " under " + run_dir);
  LoopState state;
  state.iteration = iteration;
  state.corpus = records::read_records(dir + "/dgen.records");
  state.gen_state = gen::GenState::load(dir + "/gen.state");

  nn::ParamSet pparams;
  nn::CheckpointMeta pmeta = nn::load_checkpoint(dir + "/policy.ckpt", pparams);
  state.policy_net.arch = policy::PolicyArch::parse(pmeta.arch);
  state.policy_net.params = std::move(pparams);

  nn::ParamSet rparams;
  nn::load_checkpoint(dir + "/rm.ckpt", rparams);
  state.reward_net = rm::init_reward_net(0);
  state.reward_net.params = std::move(rparams);
  return state;
}

LoopState run_loop(const LoopConfig& cfg, const std::string& run_dir,
                   int stop_after) {
  cfg.validate();
  fs::create_directories(run_dir);

  // resume from the newest intact iteration checkpoint
  int have = -1;
  for (int t = 0; t <= cfg.iterations; ++t) {
    if (read_manifest(iter_dir(run_dir, t), cfg)) have = t;
    else break;
  }

  LoopState state;
  if (have < 0) {
    state = init_state(cfg);
    IterationMetrics m0;
    m0.iteration = 0;
    m0.corpus_size = static_cast<int>(state.corpus.size());
    persist_iteration(run_dir, 0, cfg, state, {}, {}, m0);
  } else {
    state = load_iteration(cfg, run_dir, have);
  }

  int limit = stop_after < 0 ? cfg.iterations : std::min(stop_after, cfg.iterations);
  while (state.iteration < limit) {
    IterationOutput out = loop_iteration(state, cfg);
    persist_iteration(run_dir, state.iteration, cfg, state, out.admitted,
                      out.preferences, out.metrics);
  }
  return state;
}

}  // namespace genloop::loop
