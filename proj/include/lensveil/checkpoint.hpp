#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lensveil/tensor.hpp"

namespace lensveil::ckpt {

struct MetricHistory {
  std::string header;  // e.g. "epoch,train_loss,val_loss"
  std::vector<std::vector<double>> rows;
};

// A checkpoint is a directory: manifest.txt (stage tag, history, tensor
// table) plus data.bin (raw little-endian float64, row-major). The round
// trip is bit-exact; doubles in the manifest are printed with 17 digits.
struct Checkpoint {
  std::string stage;
  std::map<std::string, Tensor> tensors;
  MetricHistory history;

  const Tensor& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("checkpoint misses tensor " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return tensors.count(name) != 0; }
};

inline void save_checkpoint(const std::string& dir, const Checkpoint& ck) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string manifest_path = dir + "/manifest.txt";
  const std::string data_path = dir + "/data.bin";

  std::ofstream data(data_path, std::ios::binary);
  if (!data.good()) throw std::runtime_error("cannot write " + data_path);
  std::ofstream mf(manifest_path);
  if (!mf.good()) throw std::runtime_error("cannot write " + manifest_path);
  mf.precision(17);

  mf << "LENSVEIL-CKPT v1\n";
  mf << "stage " << ck.stage << "\n";
  mf << "history " << ck.history.rows.size() << " " << ck.history.header << "\n";
  for (const auto& row : ck.history.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) mf << (i ? "," : "") << row[i];
    mf << "\n";
  }
  mf << "tensors " << ck.tensors.size() << "\n";
  std::size_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    require(!t.is_complex(), "checkpoints hold real tensors only");
    mf << name << " " << t.shape.size();
    for (std::size_t d : t.shape) mf << " " << d;
    mf << " " << offset << "\n";
    data.write(reinterpret_cast<const char*>(t.re.data()),
               static_cast<std::streamsize>(t.re.size() * sizeof(double)));
    offset += t.re.size() * sizeof(double);
  }
  if (!data.good() || !mf.good()) throw std::runtime_error("checkpoint write failed: " + dir);
}

inline Checkpoint load_checkpoint(const std::string& dir) {
  const std::string manifest_path = dir + "/manifest.txt";
  const std::string data_path = dir + "/data.bin";
  std::ifstream mf(manifest_path);
  if (!mf.good()) throw std::runtime_error("cannot open checkpoint manifest " + manifest_path);

  Checkpoint ck;
  std::string line;
  std::getline(mf, line);
  if (line != "LENSVEIL-CKPT v1") throw std::runtime_error("corrupt checkpoint: bad magic");
  std::string key;
  mf >> key >> ck.stage;
  if (key != "stage") throw std::runtime_error("corrupt checkpoint: missing stage");
  std::size_t hist_rows = 0;
  mf >> key >> hist_rows;
  if (key != "history") throw std::runtime_error("corrupt checkpoint: missing history");
  std::getline(mf, ck.history.header);
  if (!ck.history.header.empty() && ck.history.header[0] == ' ')
    ck.history.header.erase(0, 1);
  for (std::size_t r = 0; r < hist_rows; ++r) {
    std::getline(mf, line);
    std::istringstream ss(line);
    std::vector<double> row;
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    ck.history.rows.push_back(std::move(row));
  }
  std::size_t count = 0;
  mf >> key >> count;
  if (key != "tensors") throw std::runtime_error("corrupt checkpoint: missing tensor table");

  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  std::size_t total_bytes = 0;
  for (std::size_t i = 0; i < count; ++i) {
    Entry e;
    std::size_t rank = 0;
    mf >> e.name >> rank;
    if (!mf.good()) throw std::runtime_error("corrupt checkpoint: truncated tensor table");
    e.shape.resize(rank);
    for (std::size_t d = 0; d < rank; ++d) mf >> e.shape[d];
    mf >> e.offset;
    total_bytes += numel_of(e.shape) * sizeof(double);
    entries.push_back(std::move(e));
  }

  std::ifstream data(data_path, std::ios::binary | std::ios::ate);
  if (!data.good()) throw std::runtime_error("cannot open checkpoint data " + data_path);
  const auto file_size = static_cast<std::size_t>(data.tellg());
  if (file_size != total_bytes)
    throw std::runtime_error("corrupt checkpoint: data size mismatch in " + dir);
  for (const Entry& e : entries) {
    Tensor t = Tensor::zeros(e.shape);
    data.seekg(static_cast<std::streamoff>(e.offset));
    data.read(reinterpret_cast<char*>(t.re.data()),
              static_cast<std::streamsize>(t.re.size() * sizeof(double)));
    if (!data.good()) throw std::runtime_error("corrupt checkpoint: truncated data in " + dir);
    ck.tensors.emplace(e.name, std::move(t));
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& dir, const std::string& expected_stage) {
  Checkpoint ck = load_checkpoint(dir);
  if (ck.stage != expected_stage)
    throw std::runtime_error("checkpoint stage '" + ck.stage + "' does not match expected '" +
                             expected_stage + "'");
  return ck;
}

}  // namespace lensveil::ckpt
