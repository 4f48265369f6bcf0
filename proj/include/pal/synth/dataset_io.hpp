#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pal/synth/sample.hpp"

namespace pal::synth {

// One line of a newline-delimited dataset dump. The grid itself is not
// stored; it is regenerated from the seed.
struct DatasetRecord {
  std::uint64_t seed = 0;
  TaskKind task = TaskKind::classify;
  double difficulty = 0.0;
  std::vector<EventSpec> events;
  std::vector<int> prompt_tokens;
  std::vector<int> response_tokens;
  std::size_t system_len = 0;

  friend bool operator==(const DatasetRecord&, const DatasetRecord&) = default;
};

inline DatasetRecord to_record(const SyntheticSample& s) {
  return {s.seed, s.task, s.difficulty, s.events, s.prompt_tokens, s.response_tokens, s.system_len};
}

inline nlohmann::json record_to_json(const DatasetRecord& r) {
  nlohmann::json events = nlohmann::json::array();
  for (const auto& e : r.events) {
    events.push_back({{"class", e.class_id},
                      {"onset", e.onset},
                      {"duration", e.duration},
                      {"band_center", e.band_center},
                      {"band_offset", e.band_offset},
                      {"amplitude", e.amplitude}});
  }
  return {{"seed", r.seed},
          {"task", std::string(task_name(r.task))},
          {"difficulty", r.difficulty},
          {"events", events},
          {"system_len", r.system_len},
          {"prompt", r.prompt_tokens},
          {"response", r.response_tokens}};
}

inline DatasetRecord record_from_json(const nlohmann::json& j) {
  DatasetRecord r;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.task = parse_task(j.at("task").get<std::string>());
  r.difficulty = j.at("difficulty").get<double>();
  for (const auto& e : j.at("events")) {
    EventSpec ev;
    ev.class_id = e.at("class").get<int>();
    ev.onset = e.at("onset").get<int>();
    ev.duration = e.at("duration").get<int>();
    ev.band_center = e.at("band_center").get<int>();
    ev.band_offset = e.at("band_offset").get<double>();
    ev.amplitude = e.at("amplitude").get<double>();
    r.events.push_back(ev);
  }
  r.system_len = j.at("system_len").get<std::size_t>();
  r.prompt_tokens = j.at("prompt").get<std::vector<int>>();
  r.response_tokens = j.at("response").get<std::vector<int>>();
  return r;
}

inline void dump_dataset(const std::string& path, const std::vector<SyntheticSample>& samples) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  for (const auto& s : samples) os << record_to_json(to_record(s)).dump() << '\n';
}

inline std::vector<DatasetRecord> load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::vector<DatasetRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace pal::synth
