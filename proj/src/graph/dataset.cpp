#include "xane3/graph/dataset.hpp"

#include <fstream>

#include "json.hpp"
#include "xane3/errors.hpp"

namespace xane3::graph {

using nlohmann::json;

namespace {

json structure_json(const Structure& s) {
  json lattice = json::array();
  for (int r = 0; r < 3; ++r) lattice.push_back({s.lattice(r, 0), s.lattice(r, 1), s.lattice(r, 2)});
  json positions = json::array();
  for (const auto& p : s.positions) positions.push_back({p.x(), p.y(), p.z()});
  return json{{"lattice", lattice},
              {"pbc", {s.pbc[0], s.pbc[1], s.pbc[2]}},
              {"positions", positions},
              {"numbers", s.numbers}};
}

const json& field(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw IoError(std::string("record is missing '") + key + "'");
  return *it;
}

Eigen::Vector3d vec3(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw IoError(std::string(what) + " entries must have 3 numbers");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace

Record parse_record(const std::string& line) {
  try {
    const json j = json::parse(line);
    Record r;
    const auto& lattice = field(j, "lattice");
    if (!lattice.is_array() || lattice.size() != 3) throw IoError("lattice must be 3 rows");
    for (int row = 0; row < 3; ++row) r.structure.lattice.row(row) = vec3(lattice[row], "lattice").transpose();
    const auto& pbc = field(j, "pbc");
    if (!pbc.is_array() || pbc.size() != 3) throw IoError("pbc must have 3 booleans");
    for (int a = 0; a < 3; ++a) r.structure.pbc[a] = pbc[a].get<bool>();
    for (const auto& p : field(j, "positions")) r.structure.positions.push_back(vec3(p, "positions"));
    r.structure.numbers = field(j, "numbers").get<std::vector<int>>();
    const auto absorber = field(j, "absorber").get<long long>();
    if (absorber < 0) throw IoError("absorber must be non-negative");
    r.structure.absorber_sites = {static_cast<std::size_t>(absorber)};
    r.spectrum = field(j, "spectrum").get<std::vector<double>>();
    r.e0 = field(j, "e0").get<double>();
    r.structure.validate();
    return r;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed record: ") + e.what());
  } catch (const IoError&) {
    throw;
  } catch (const Error& e) {
    throw IoError(std::string("invalid record: ") + e.what());
  }
}

std::string format_record(const Record& r) {
  json j = structure_json(r.structure);
  j["absorber"] = r.absorber();
  j["spectrum"] = r.spectrum;
  j["e0"] = r.e0;
  return j.dump();
}

std::vector<Record> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<Record> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_record(line));
    } catch (const IoError& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<Record>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : records) out << format_record(r) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

std::string structure_key(const Structure& s) { return structure_json(s).dump(); }

}  // namespace xane3::graph
