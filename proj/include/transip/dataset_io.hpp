#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "transip/molecule.hpp"

namespace transip {

// JSON Lines, one molecule per line:
//   {"z": [..], "r": [x0, y0, z0, x1, ...], "q": 0, "s": 1,
//    "energy": -1.25, "forces": [fx0, fy0, fz0, ...]}
// Floats are written with shortest round-trip precision.

std::string to_json_line(const LabeledMolecule& record);
/// Throws DataError naming `line_number` on malformed input.
LabeledMolecule parse_json_line(const std::string& line, std::size_t line_number);

void write_dataset(const std::vector<LabeledMolecule>& records, std::ostream& out);
void write_dataset(const std::vector<LabeledMolecule>& records, const std::filesystem::path& path);
/// Blank lines are skipped; an empty file gives an empty list.
std::vector<LabeledMolecule> read_dataset(std::istream& in);
std::vector<LabeledMolecule> read_dataset(const std::filesystem::path& path);

/// SHA-256 hex digest of a file's bytes.
std::string file_digest(const std::filesystem::path& path);
std::string sha256_hex(const std::string& bytes);

}  // namespace transip
