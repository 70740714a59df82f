#include "genloop/records.hpp"

#include <json.hpp>

#include <fstream>

namespace genloop::records {

using nlohmann::json;
using namespace genloop::world;

std::string to_line(const Record& r) {
  json j;  // nlohmann objects iterate alphabetically: stable bytes
  j["image_seed"] = std::to_string(r.image_seed);
  j["modality"] = r.modality;
  j["task"] = r.task;
  j["template_id"] = r.template_id;
  j["question_tokens"] = r.question_tokens;
  j["answer_tokens"] = r.answer_tokens;
  j["provenance"] = r.provenance;
  if (r.reward_score) j["reward_score"] = *r.reward_score;
  if (r.strategy) j["strategy"] = *r.strategy;
  if (r.grade) j["grade"] = *r.grade;
  if (r.target_score) j["target_score"] = *r.target_score;
  if (r.corruption_seed) j["corruption_seed"] = std::to_string(*r.corruption_seed);
  if (r.admitted_iter) j["admitted_iter"] = *r.admitted_iter;
  return j.dump();
}

Record from_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed record line: ") + e.what());
  }
  try {
    Record r;
    r.image_seed = std::stoull(j.at("image_seed").get<std::string>());
    r.modality = j.at("modality").get<std::string>();
    r.task = j.at("task").get<std::string>();
    r.template_id = j.at("template_id").get<int>();
    r.question_tokens = j.at("question_tokens").get<std::string>();
    r.answer_tokens = j.at("answer_tokens").get<std::string>();
    r.provenance = j.at("provenance").get<std::string>();
    if (j.contains("reward_score")) r.reward_score = j["reward_score"].get<double>();
    if (j.contains("strategy")) r.strategy = j["strategy"].get<std::string>();
    if (j.contains("grade")) r.grade = j["grade"].get<int>();
    if (j.contains("target_score")) r.target_score = j["target_score"].get<double>();
    if (j.contains("corruption_seed"))
      r.corruption_seed = std::stoull(j["corruption_seed"].get<std::string>());
    if (j.contains("admitted_iter")) r.admitted_iter = j["admitted_iter"].get<int>();
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("record missing field: ") + e.what());
  } catch (const std::logic_error& e) {
    throw DataError(std::string("record field parse failure: ") + e.what());
  }
}

Record make_record(const VqaTriplet& t) {
  const Vocab& v = Vocab::instance();
  Record r;
  r.image_seed = t.image.seed;
  r.modality = modality_name(t.image.modality);
  r.task = task_name(t.question.task);
  r.template_id = t.question.template_id;
  r.question_tokens = v.decode(t.question.tokens);
  r.answer_tokens = v.decode(t.answer);
  r.provenance = provenance_name(t.provenance);
  return r;
}

VqaTriplet to_triplet(const Record& r) {
  const Vocab& v = Vocab::instance();
  VqaTriplet t;
  t.image = sample_image_with_modality(r.image_seed, modality_from(r.modality));
  t.question = render_question(task_from(r.task), r.template_id, t.image);
  if (v.decode(t.question.tokens) != r.question_tokens)
    throw DataError("record question tokens do not match their re-render (seed " +
                    std::to_string(r.image_seed) + ")");
  t.answer = v.encode(r.answer_tokens);
  t.provenance = provenance_from(r.provenance);
  return t;
}

void write_records(const std::string& path, const std::vector<Record>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write records file: " + path);
  for (const auto& r : rows) out << to_line(r) << '\n';
  if (!out) throw DataError("short write on records file: " + path);
}

std::vector<Record> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open records file: " + path);
  std::vector<Record> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    rows.push_back(from_line(line));
  }
  return rows;
}

}  // namespace genloop::records
