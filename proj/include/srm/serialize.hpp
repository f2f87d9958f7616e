// SPDX-License-Identifier: Apache-2.0
//
// Named-tensor container: little-endian f64 payload behind a JSON header
// (names, shapes, element offsets). Round-trips are bit-exact. Used for
// learned parameters, golden tensors, and bundle fingerprints.
//
// Layout: 8-byte magic "SRMBLOB1" | u64 LE header length | header JSON
// (UTF-8) | payload of f64 little-endian values.

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "srm/tensor.hpp"

namespace srm {

class TensorStore {
 public:
  void add(const std::string& name, const Tensor& t) {
    if (index_.count(name)) throw ValueError("TensorStore: duplicate entry '" + name + "'");
    index_[name] = entries_.size();
    entries_.emplace_back(name, t);
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("TensorStore: missing entry '" + name + "'");
    return entries_[it->second].second;
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return entries_; }

  std::vector<std::uint8_t> serialize() const {
    nlohmann::ordered_json header;
    header["version"] = 1;
    header["entries"] = nlohmann::ordered_json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, tensor] : entries_) {
      nlohmann::ordered_json item;
      item["name"] = name;
      item["shape"] = tensor.shape();
      item["offset"] = offset;
      header["entries"].push_back(item);
      offset += static_cast<std::uint64_t>(tensor.numel());
    }
    header["count"] = offset;
    const std::string hs = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(16 + hs.size() + offset * 8);
    const char magic[8] = {'S', 'R', 'M', 'B', 'L', 'O', 'B', '1'};
    out.insert(out.end(), magic, magic + 8);
    const std::uint64_t hlen = hs.size();
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(hlen >> (8 * i)));
    out.insert(out.end(), hs.begin(), hs.end());
    for (const auto& [name, tensor] : entries_)
      for (std::int64_t i = 0; i < tensor.numel(); ++i) {
        std::uint64_t bits;
        const double v = tensor.ptr()[i];
        std::memcpy(&bits, &v, 8);
        for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
      }
    return out;
  }

  static TensorStore deserialize(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), "SRMBLOB1", 8) != 0)
      throw ValueError("TensorStore: bad magic");
    std::uint64_t hlen = 0;
    for (int i = 7; i >= 0; --i) hlen = (hlen << 8) | bytes[8 + static_cast<std::size_t>(i)];
    if (bytes.size() < 16 + hlen) throw ValueError("TensorStore: truncated header");
    const nlohmann::json header =
        nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
    const std::size_t payload_at = 16 + static_cast<std::size_t>(hlen);
    TensorStore store;
    for (const auto& item : header.at("entries")) {
      const std::string name = item.at("name").get<std::string>();
      const Shape shape = item.at("shape").get<Shape>();
      const std::uint64_t offset = item.at("offset").get<std::uint64_t>();
      const std::int64_t n = numel_of(shape);
      std::vector<double> data(static_cast<std::size_t>(n));
      const std::size_t base = payload_at + static_cast<std::size_t>(offset) * 8;
      if (base + static_cast<std::size_t>(n) * 8 > bytes.size())
        throw ValueError("TensorStore: truncated payload for '" + name + "'");
      for (std::int64_t i = 0; i < n; ++i) {
        std::uint64_t bits = 0;
        for (int b = 7; b >= 0; --b)
          bits = (bits << 8) | bytes[base + static_cast<std::size_t>(i) * 8 + static_cast<std::size_t>(b)];
        double v;
        std::memcpy(&v, &bits, 8);
        data[static_cast<std::size_t>(i)] = v;
      }
      store.add(name, Tensor(shape, std::move(data)));
    }
    return store;
  }

  void save(const std::string& path) const {
    const auto bytes = serialize();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ValueError("TensorStore: cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw ValueError("TensorStore: write to '" + path + "' failed");
  }

  static TensorStore load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValueError("TensorStore: cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return deserialize(bytes);
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace srm
