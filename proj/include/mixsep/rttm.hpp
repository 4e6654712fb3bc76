#pragma once

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "mixsep/error.hpp"

namespace mixsep {

struct DiarizationEntry {
  std::string speaker;
  double start_s = 0.0;
  double end_s = 0.0;
  std::string segment_id;
};

/// "Who spoke when": per-speaker activity intervals with global identities.
struct Diarization {
  std::vector<DiarizationEntry> entries;

  void sort() {
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
      return std::tie(a.start_s, a.speaker, a.end_s) < std::tie(b.start_s, b.speaker, b.end_s);
    });
  }
};

/// Reference annotation; same shape as a diarization.
using Annotation = Diarization;

/// One "SPEAKER <file> 1 <start> <dur> <NA> <NA> <spk> <NA> <NA>" line per entry, 3 decimals.
inline std::string format_rttm(const Diarization& d, const std::string& file_id) {
  std::string out;
  char buf[512];
  for (const auto& e : d.entries) {
    std::snprintf(buf, sizeof buf, "SPEAKER %s 1 %.3f %.3f <NA> <NA> %s <NA> <NA>\n", file_id.c_str(), e.start_s,
                  e.end_s - e.start_s, e.speaker.c_str());
    out += buf;
  }
  return out;
}

inline void write_rttm(const std::filesystem::path& path, const Diarization& d, const std::string& file_id) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InvalidInput("cannot write '" + path.string() + "'");
  os << format_rttm(d, file_id);
}

/// Parses SPEAKER lines; other record types and blank lines are skipped.
/// Malformed SPEAKER lines raise InvalidInput naming the line number.
inline Diarization parse_rttm(std::istream& in, const std::string& source = "rttm") {
  Diarization d;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::vector<std::string> tok;
    for (std::string w; ss >> w;) tok.push_back(w);
    if (tok.empty() || tok[0].starts_with(";;")) continue;
    auto bad = [&](const std::string& why) {
      throw InvalidInput(source + ": line " + std::to_string(lineno) + ": " + why);
    };
    if (tok[0] != "SPEAKER") {
      // Other standard record types (SPKR-INFO, NON-SPEECH, ...) are upper case with '-'.
      if (std::all_of(tok[0].begin(), tok[0].end(), [](unsigned char ch) { return std::isupper(ch) || ch == '-'; }))
        continue;
      bad("unknown record type '" + tok[0] + "'");
    }
    if (tok.size() < 8) bad("expected at least 8 fields");
    double start = 0.0, dur = 0.0;
    try {
      std::size_t used = 0;
      start = std::stod(tok[3], &used);
      if (used != tok[3].size()) bad("bad start time");
      dur = std::stod(tok[4], &used);
      if (used != tok[4].size()) bad("bad duration");
    } catch (const std::logic_error&) {
      bad("non-numeric time field");
    }
    if (!(dur > 0.0) || start < 0.0) bad("non-positive duration or negative start");
    d.entries.push_back({tok[7], start, start + dur, tok[1]});
  }
  return d;
}

inline Diarization read_rttm(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open '" + path.string() + "'");
  return parse_rttm(in, path.string());
}

}  // namespace mixsep
