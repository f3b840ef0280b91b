#pragma once

// On-disk formats.
//
// Network directory:
//   network.json   {"format": "cpconv-network-v1", "input_shape": [C, H, W],
//                   "layers": [ ... ]}
//   <layer>.kernel.cpt, <layer>.bias.cpt   weight blobs (CPT1)
// Layer objects:
//   {"name", "type": "conv", "kernel": file, "bias": file | null,
//    "kernel_shape": [kh, kw, S/groups, T], "groups", "padding": "valid"|"same",
//    "frozen", "inserted"}
//   {"name", "type": "maxout", "group_size"}
//   {"name", "type": "softmax", "num_classes"}
//
// CP decomposition directory:
//   manifest.txt   "key = value" lines: format, rank, dtype, modes, factorN,
//                  plus optional provenance keys (layer, method, seed,
//                  rel_error)
//   factorN.cpt    mode-N factor, shape rows x rank
// Component weights are absorbed into factor 0 before saving.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "cpconv/cp_decomposition.hpp"
#include "cpconv/cpt_io.hpp"
#include "cpconv/network.hpp"

namespace cpconv {

inline constexpr const char* kNetworkFormat = "cpconv-network-v1";
inline constexpr const char* kCpFormat = "cpconv-cp-v1";

// Accepts either the model directory or the network.json inside it.
inline std::filesystem::path network_manifest_path(const std::filesystem::path& model) {
  if (std::filesystem::is_directory(model)) return model / "network.json";
  return model;
}

template <typename T>
void save_network(const std::filesystem::path& dir, const NetworkSpec<T>& net) {
  net.validate();
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json root;
  root["format"] = kNetworkFormat;
  root["input_shape"] = net.input_shape;
  root["layers"] = nlohmann::ordered_json::array();
  for (const auto& layer : net.layers) {
    nlohmann::ordered_json j;
    j["name"] = layer.name;
    std::visit(
        [&](const auto& body) {
          using B = std::decay_t<decltype(body)>;
          if constexpr (std::is_same_v<B, ConvLayerSpec<T>>) {
            j["type"] = "conv";
            const std::string kernel_file = layer.name + ".kernel.cpt";
            save_cpt(dir / kernel_file, body.kernel);
            j["kernel"] = kernel_file;
            if (body.bias) {
              const std::string bias_file = layer.name + ".bias.cpt";
              save_cpt(dir / bias_file, *body.bias);
              j["bias"] = bias_file;
            } else {
              j["bias"] = nullptr;
            }
            j["kernel_shape"] = body.kernel.shape();
            j["groups"] = body.groups;
            j["padding"] = to_string(body.padding);
            j["frozen"] = body.frozen;
            j["inserted"] = body.inserted;
          } else if constexpr (std::is_same_v<B, MaxoutLayerSpec>) {
            j["type"] = "maxout";
            j["group_size"] = body.group_size;
          } else {
            j["type"] = "softmax";
            j["num_classes"] = body.num_classes;
          }
        },
        layer.body);
    root["layers"].push_back(std::move(j));
  }
  std::ofstream os(dir / "network.json", std::ios::trunc);
  if (!os) throw FormatError("cannot write " + (dir / "network.json").string());
  os << root.dump(2) << '\n';
}

template <typename T>
NetworkSpec<T> load_network(const std::filesystem::path& model) {
  const auto manifest = network_manifest_path(model);
  const auto dir = manifest.parent_path();
  std::ifstream is(manifest);
  if (!is) throw FormatError("cannot open " + manifest.string());
  NetworkSpec<T> net;
  try {
    const auto root = nlohmann::json::parse(is);
    if (root.at("format").get<std::string>() != kNetworkFormat) {
      throw FormatError("network manifest: unsupported format " + root.at("format").dump());
    }
    net.input_shape = root.at("input_shape").get<Shape>();
    for (const auto& j : root.at("layers")) {
      const std::string name = j.at("name").get<std::string>();
      const std::string type = j.at("type").get<std::string>();
      if (type == "conv") {
        ConvLayerSpec<T> conv;
        conv.kernel = load_cpt<T>(dir / j.at("kernel").get<std::string>());
        if (j.contains("bias") && !j.at("bias").is_null()) conv.bias = load_cpt<T>(dir / j.at("bias").get<std::string>());
        conv.groups = j.value("groups", std::size_t{1});
        conv.padding = parse_padding(j.value("padding", std::string("valid")));
        conv.frozen = j.value("frozen", false);
        conv.inserted = j.value("inserted", false);
        if (j.contains("kernel_shape") && j.at("kernel_shape").get<Shape>() != conv.kernel.shape()) {
          throw FormatError("network manifest: kernel blob of '" + name + "' does not match kernel_shape");
        }
        net.layers.push_back({name, std::move(conv)});
      } else if (type == "maxout") {
        net.layers.push_back({name, MaxoutLayerSpec{j.at("group_size").get<std::size_t>()}});
      } else if (type == "softmax") {
        net.layers.push_back({name, SoftmaxLayerSpec{j.at("num_classes").get<std::size_t>()}});
      } else {
        throw FormatError("network manifest: unknown layer type '" + type + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("network manifest " + manifest.string() + ": " + e.what());
  }
  net.validate();
  return net;
}

template <typename T>
void save_decomposition(const std::filesystem::path& dir, const CPDecomposition<T>& d,
                        const std::map<std::string, std::string>& extra = {}) {
  const CPDecomposition<T> a = absorb_weights(d);
  a.validate();
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "manifest.txt", std::ios::trunc);
  if (!os) throw FormatError("cannot write " + (dir / "manifest.txt").string());
  os << "format = " << kCpFormat << '\n';
  os << "rank = " << a.rank() << '\n';
  os << "dtype = " << (dtype_of<T>() == DType::f32 ? "f32" : "f64") << '\n';
  os << "modes =";
  for (std::size_t n : a.shape()) os << ' ' << n;
  os << '\n';
  for (std::size_t m = 0; m < a.order(); ++m) {
    const std::string file = "factor" + std::to_string(m) + ".cpt";
    save_cpt(dir / file, a.factors[m].as_tensor());
    os << "factor" << m << " = " << file << '\n';
  }
  for (const auto& [k, v] : extra) os << k << " = " << v << '\n';
}

inline std::map<std::string, std::string> read_key_values(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(path.string() + ": malformed line '" + line + "'");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

template <typename T>
CPDecomposition<T> load_decomposition(const std::filesystem::path& dir,
                                      std::map<std::string, std::string>* manifest_out = nullptr) {
  const auto kv = read_key_values(dir / "manifest.txt");
  auto get = [&](const std::string& key) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("CP manifest: missing key '" + key + "'");
    return it->second;
  };
  if (get("format") != kCpFormat) throw FormatError("CP manifest: unsupported format " + get("format"));
  const std::size_t rank = std::stoul(get("rank"));
  Shape modes;
  {
    std::istringstream ss(get("modes"));
    std::size_t n;
    while (ss >> n) modes.push_back(n);
  }
  CPDecomposition<T> d;
  for (std::size_t m = 0; m < modes.size(); ++m) {
    const DenseTensor<T> t = load_cpt<T>(dir / get("factor" + std::to_string(m)));
    if (t.shape() != Shape{modes[m], rank}) {
      throw FormatError("CP manifest: factor" + std::to_string(m) + " has shape " + shape_string(t.shape()));
    }
    d.factors.emplace_back(modes[m], rank, t.values());
  }
  d.validate();
  if (manifest_out) *manifest_out = kv;
  return d;
}

}  // namespace cpconv
