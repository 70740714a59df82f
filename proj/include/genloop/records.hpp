#pragma once

// Line-delimited dataset records: one JSON object per line with stable key
// order, so equal corpora serialize byte-identically.

#include <optional>
#include <string>
#include <vector>

#include "genloop/world.hpp"

namespace genloop::records {

struct Record {
  uint64_t image_seed = 0;
  std::string modality;
  std::string task;
  int template_id = 0;
  std::string question_tokens;
  std::string answer_tokens;
  std::string provenance;
  std::optional<double> reward_score;
  std::optional<std::string> strategy;
  std::optional<int> grade;
  std::optional<double> target_score;
  std::optional<uint64_t> corruption_seed;
  std::optional<int> admitted_iter;
};

std::string to_line(const Record& r);
Record from_line(const std::string& line);

Record make_record(const world::VqaTriplet& t);
// Re-renders the question from (task, template, image seed) and verifies the
// stored token strings, so a loaded triplet always matches its generator.
world::VqaTriplet to_triplet(const Record& r);

void write_records(const std::string& path, const std::vector<Record>& rows);
std::vector<Record> read_records(const std::string& path);

}  // namespace genloop::records
