#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "xane3/graph/graph.hpp"

namespace xane3::graph {

/// One absorber graph worth of training data: a structure with a single
/// absorber site, its normalized spectrum and the edge energy.
struct Record {
  Structure structure;
  std::vector<double> spectrum;
  double e0 = 0.0;

  std::size_t absorber() const { return structure.absorber_sites.at(0); }
};

/// Parse one JSON object line. Throws IoError with the reason on bad input.
Record parse_record(const std::string& line);
std::string format_record(const Record& r);

std::vector<Record> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<Record>& records);

/// Key identifying records that share the same atoms, used to keep
/// absorbers of one structure in the same split.
std::string structure_key(const Structure& s);

}  // namespace xane3::graph
