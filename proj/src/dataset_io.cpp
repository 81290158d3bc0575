#include "transip/dataset_io.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <iomanip>
#include <memory>
#include "json.hpp"
#include <sstream>

#include "transip/errors.hpp"

namespace transip {

namespace {

using nlohmann::json;

std::vector<double> flatten(const std::vector<Vec3>& rows) {
  std::vector<double> out;
  out.reserve(rows.size() * 3);
  for (const auto& r : rows) out.insert(out.end(), {r.x(), r.y(), r.z()});
  return out;
}

std::vector<Vec3> unflatten(const std::vector<double>& flat) {
  std::vector<Vec3> rows;
  for (std::size_t i = 0; i + 2 < flat.size(); i += 3) rows.emplace_back(flat[i], flat[i + 1], flat[i + 2]);
  return rows;
}

[[noreturn]] void fail(std::size_t line, const std::string& what) {
  throw DataError("dataset line " + std::to_string(line) + ": " + what);
}

}  // namespace

std::string to_json_line(const LabeledMolecule& record) {
  const Molecule& m = record.molecule;
  json j;
  j["z"] = m.atomic_numbers;
  j["r"] = flatten(m.positions);
  j["q"] = m.charge;
  j["s"] = m.spin;
  j["energy"] = record.energy;
  j["forces"] = flatten(record.forces);
  return j.dump();
}

LabeledMolecule parse_json_line(const std::string& line, std::size_t line_number) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    fail(line_number, std::string("invalid JSON (") + e.what() + ")");
  }
  if (!j.is_object()) fail(line_number, "record is not a JSON object");
  for (const char* key : {"z", "r", "q", "s", "energy", "forces"}) {
    if (!j.contains(key)) fail(line_number, std::string("missing key \"") + key + "\"");
  }
  LabeledMolecule record;
  std::vector<double> r, f;
  try {
    record.molecule.atomic_numbers = j.at("z").get<std::vector<int>>();
    r = j.at("r").get<std::vector<double>>();
    record.molecule.charge = j.at("q").get<int>();
    record.molecule.spin = j.at("s").get<int>();
    record.energy = j.at("energy").get<double>();
    f = j.at("forces").get<std::vector<double>>();
  } catch (const json::exception& e) {
    fail(line_number, std::string("wrong field type (") + e.what() + ")");
  }
  const std::size_t n = record.molecule.atomic_numbers.size();
  if (r.size() != 3 * n) {
    fail(line_number, std::to_string(n) + " atomic numbers but " + std::to_string(r.size()) +
                          " coordinate values (expected " + std::to_string(3 * n) + ")");
  }
  if (f.size() != 3 * n) {
    fail(line_number, std::to_string(n) + " atomic numbers but " + std::to_string(f.size()) +
                          " force values (expected " + std::to_string(3 * n) + ")");
  }
  record.molecule.positions = unflatten(r);
  record.forces = unflatten(f);
  try {
    validate(record);
  } catch (const std::invalid_argument& e) {
    fail(line_number, e.what());
  }
  return record;
}

void write_dataset(const std::vector<LabeledMolecule>& records, std::ostream& out) {
  for (const auto& r : records) out << to_json_line(r) << '\n';
}

void write_dataset(const std::vector<LabeledMolecule>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  write_dataset(records, out);
  if (!out) throw DataError("failed writing " + path.string());
}

std::vector<LabeledMolecule> read_dataset(std::istream& in) {
  std::vector<LabeledMolecule> records;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    records.push_back(parse_json_line(line, number));
  }
  return records;
}

std::vector<LabeledMolecule> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset " + path.string());
  return read_dataset(in);
}

std::string sha256_hex(const std::string& bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &length) != 1) {
    throw std::runtime_error("SHA-256 computation failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < length; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return sha256_hex(buffer.str());
}

}  // namespace transip
