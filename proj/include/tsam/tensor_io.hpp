#pragma once

// Tensor exchange: a JSON manifest {name, rows, cols, dtype:"f64",
// byte_order:"little", file} next to a raw row-major little-endian f64
// payload. Small matrices can also go through CSV at 17 significant digits.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "json.hpp"
#include "tsam/mat.hpp"

namespace tsam::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Writes via a sibling temp file and rename(2), so readers never observe a
// truncated file at `path`.
inline void atomic_write(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string encode_f64_le(const Mat& m) {
  std::string bytes(m.size() * sizeof(double), '\0');
  for (std::size_t i = 0; i < m.size(); ++i) {
    auto bits = std::bit_cast<std::uint64_t>(m.flat()[i]);
    for (int b = 0; b < 8; ++b) bytes[i * 8 + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  return bytes;
}

inline Mat decode_f64_le(const std::string& bytes, std::size_t rows, std::size_t cols) {
  Mat m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i * 8 + static_cast<std::size_t>(b)])) << (8 * b);
    m.flat()[i] = std::bit_cast<double>(bits);
  }
  return m;
}

inline json manifest_entry(const std::string& name, const Mat& m) {
  return json{{"name", name},          {"rows", m.rows()},         {"cols", m.cols()},
              {"dtype", "f64"},        {"byte_order", "little"},   {"file", name + ".bin"}};
}

// Writes <dir>/<name>.bin and <dir>/<name>.json; returns the manifest entry.
inline json write_tensor(const fs::path& dir, const std::string& name, const Mat& m) {
  json entry = manifest_entry(name, m);
  atomic_write(dir / (name + ".bin"), encode_f64_le(m));
  atomic_write(dir / (name + ".json"), entry.dump(2) + "\n");
  return entry;
}

inline Mat read_tensor(const json& entry, const fs::path& base_dir) {
  auto field = [&](const char* key) -> const json& {
    if (!entry.contains(key)) throw IngestionError(key, "missing");
    return entry.at(key);
  };
  const std::string name = field("name").is_string() ? field("name").get<std::string>() : "";
  if (!field("rows").is_number_unsigned()) throw IngestionError("rows", "must be a non-negative integer");
  if (!field("cols").is_number_unsigned()) throw IngestionError("cols", "must be a non-negative integer");
  if (field("dtype") != "f64") throw IngestionError("dtype", "expected \"f64\" for tensor '" + name + "'");
  if (field("byte_order") != "little") {
    throw IngestionError("byte_order", "expected \"little\" for tensor '" + name + "'");
  }
  const auto rows = field("rows").get<std::size_t>();
  const auto cols = field("cols").get<std::size_t>();
  const std::string file = entry.contains("file") ? entry.at("file").get<std::string>() : name + ".bin";
  const fs::path payload_path = base_dir / file;
  if (!fs::exists(payload_path)) throw IngestionError("file", "payload " + payload_path.string() + " not found");
  const std::string bytes = read_file(payload_path);
  if (bytes.size() != rows * cols * sizeof(double)) {
    throw IngestionError("rows", "rows x cols = " + std::to_string(rows) + "x" + std::to_string(cols) +
                                     " needs " + std::to_string(rows * cols * sizeof(double)) +
                                     " bytes, payload has " + std::to_string(bytes.size()));
  }
  Mat m = decode_f64_le(bytes, rows, cols);
  if (!m.all_finite()) throw IngestionError("file", "payload for '" + name + "' has non-finite values");
  return m;
}

// Reads a standalone <name>.json manifest.
inline Mat read_tensor(const fs::path& manifest_path) {
  json entry;
  try {
    entry = json::parse(read_file(manifest_path));
  } catch (const json::parse_error& e) {
    throw IngestionError("manifest", e.what());
  }
  return read_tensor(entry, manifest_path.parent_path());
}

// A directory of named tensors with a single manifest.json index.
inline void write_tensor_set(const fs::path& dir, const std::vector<std::pair<std::string, const Mat*>>& tensors) {
  json index = json::object();
  index["tensors"] = json::array();
  for (const auto& [name, m] : tensors) index["tensors"].push_back(write_tensor(dir, name, *m));
  atomic_write(dir / "manifest.json", index.dump(2) + "\n");
}

inline std::map<std::string, Mat> read_tensor_set(const fs::path& manifest_path) {
  json index;
  try {
    index = json::parse(read_file(manifest_path));
  } catch (const json::parse_error& e) {
    throw IngestionError("manifest", e.what());
  }
  if (!index.contains("tensors") || !index["tensors"].is_array()) {
    throw IngestionError("tensors", "expected an array of tensor entries");
  }
  std::map<std::string, Mat> out;
  for (const auto& entry : index["tensors"]) {
    if (!entry.contains("name") || !entry["name"].is_string()) throw IngestionError("name", "missing");
    out.emplace(entry["name"].get<std::string>(), read_tensor(entry, manifest_path.parent_path()));
  }
  return out;
}

inline std::string format_double(double v) {
  std::ostringstream ss;
  ss << std::setprecision(17) << v;
  return ss.str();
}

inline std::string to_csv(const Mat& m) {
  std::ostringstream ss;
  ss << std::setprecision(17);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      if (c) ss << ',';
      ss << m(r, c);
    }
    ss << '\n';
  }
  return ss.str();
}

inline Mat from_csv(const std::string& text) {
  std::vector<double> data;
  std::size_t rows = 0, cols = 0;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t n = 0;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      try {
        data.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw IngestionError("csv", "bad number '" + cell + "' on row " + std::to_string(rows));
      }
      ++n;
    }
    if (rows == 0) cols = n;
    else if (n != cols) throw IngestionError("csv", "ragged row " + std::to_string(rows));
    ++rows;
  }
  return Mat(rows, cols, std::move(data));
}

}  // namespace tsam::io
