#pragma once

#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "wordfuse/json_util.hpp"
#include "wordfuse/tokenization.hpp"

namespace wordfuse {

/// A completed hypothesis with its scores. Scores are length-normalized
/// natural-log probabilities.
struct NBestEntry {
  std::string surface;
  std::vector<Token> tokens;  // generator tokens; not part of the file format
  double gen_score = 0.0;
  std::optional<double> ranker_score;
  double merged = 0.0;
  std::optional<double> selector_score;
  std::string origin;
  bool scored = true;  // false when a scorer failed on this entry
};

inline json to_json(const NBestEntry& e, std::size_t rank) {
  json j = json::object();
  j["rank"] = rank;
  j["surface"] = e.surface;
  j["gen_score"] = encode_real(e.gen_score);
  j["ranker_score"] = encode_real(e.ranker_score);
  j["merged"] = encode_real(e.merged);
  j["selector_score"] = encode_real(e.selector_score);
  j["origin"] = e.origin;
  return j;
}

inline NBestEntry nbest_entry_from_json(const json& j) {
  NBestEntry e;
  e.surface = j.at("surface").get<std::string>();
  e.gen_score = decode_real(j.at("gen_score"));
  e.ranker_score = decode_optional_real(j.value("ranker_score", json(nullptr)));
  e.merged = decode_real(j.at("merged"));
  e.selector_score = decode_optional_real(j.value("selector_score", json(nullptr)));
  e.origin = j.value("origin", std::string{});
  return e;
}

/// N-best file: one JSON object per line, in rank order, with the fields
/// rank, surface, gen_score, ranker_score, merged, selector_score, origin.
/// Reals are written with round-trip precision, so a write/read cycle is
/// bit-exact.
inline void write_nbest(std::ostream& out, const std::vector<NBestEntry>& entries) {
  for (std::size_t i = 0; i < entries.size(); ++i) out << to_json(entries[i], i + 1).dump() << '\n';
}

inline std::vector<NBestEntry> read_nbest(std::istream& in) {
  std::vector<NBestEntry> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      entries.push_back(nbest_entry_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw Error("n-best line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return entries;
}

inline std::vector<NBestEntry> read_nbest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open n-best file " + path.string());
  return read_nbest(in);
}

}  // namespace wordfuse
