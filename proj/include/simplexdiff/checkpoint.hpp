#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "simplexdiff/config.hpp"
#include "simplexdiff/error.hpp"
#include "simplexdiff/model.hpp"
#include "simplexdiff/tensor.hpp"
#include "simplexdiff/trainer.hpp"

namespace simplexdiff {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O writes host byte order and assumes little-endian");

inline constexpr char checkpoint_magic[8] = {'S', 'P', 'X', 'D', 'I', 'F', 'F', '\0'};
inline constexpr std::uint32_t checkpoint_version = 1;

/// Layout (all integers little-endian):
///   magic "SPXDIFF\0" | u32 version | u32 scalar bytes | u64 config length |
///   config text | u32 tensor count | per tensor: u32 name length, name,
///   u32 rank, u64 dims[rank], raw values.
template <class T>
struct CheckpointData {
  std::string config_text;
  std::vector<std::pair<std::string, Tensor<T>>> tensors;
};

namespace detail {

template <class I>
void put(std::ostream& os, I v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class I>
I take(std::istream& is, const std::string& path) {
  I v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
    fail(ErrorKind::io, path + ": truncated checkpoint");
  }
  return v;
}

inline std::string take_string(std::istream& is, std::uint64_t n, const std::string& path) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) {
    fail(ErrorKind::io, path + ": truncated checkpoint");
  }
  return s;
}

}  // namespace detail

/// Writes to a temporary file and renames it into place.
template <class T>
void write_checkpoint(const std::string& path, const CheckpointData<T>& data) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) fail(ErrorKind::io, "cannot write checkpoint " + tmp);
    os.write(checkpoint_magic, sizeof checkpoint_magic);
    detail::put<std::uint32_t>(os, checkpoint_version);
    detail::put<std::uint32_t>(os, sizeof(T));
    detail::put<std::uint64_t>(os, data.config_text.size());
    os.write(data.config_text.data(), static_cast<std::streamsize>(data.config_text.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(data.tensors.size()));
    for (const auto& [name, t] : data.tensors) {
      detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
      for (std::size_t d : t.shape) detail::put<std::uint64_t>(os, d);
      os.write(reinterpret_cast<const char*>(t.values.data()),
               static_cast<std::streamsize>(t.values.size() * sizeof(T)));
    }
    if (!os) fail(ErrorKind::io, "failed writing checkpoint " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::io, "cannot move checkpoint into place at " + path + ": " + ec.message());
}

template <class T>
CheckpointData<T> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::io, "cannot open checkpoint " + path);
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, checkpoint_magic, sizeof magic) != 0) {
    fail(ErrorKind::compatibility, path + ": not a checkpoint file");
  }
  const auto version = detail::take<std::uint32_t>(is, path);
  if (version != checkpoint_version) {
    fail(ErrorKind::compatibility, path + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto scalar = detail::take<std::uint32_t>(is, path);
  if (scalar != sizeof(T)) {
    fail(ErrorKind::compatibility, path + ": stores " + std::to_string(scalar) +
                                       "-byte scalars, reader expects " + std::to_string(sizeof(T)));
  }
  CheckpointData<T> data;
  data.config_text = detail::take_string(is, detail::take<std::uint64_t>(is, path), path);
  const auto count = detail::take<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = detail::take_string(is, detail::take<std::uint32_t>(is, path), path);
    const auto rank = detail::take<std::uint32_t>(is, path);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(detail::take<std::uint64_t>(is, path));
    Tensor<T> t(shape);
    if (!t.values.empty() &&
        !is.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(t.size() * sizeof(T)))) {
      fail(ErrorKind::io, path + ": truncated tensor " + name);
    }
    data.tensors.emplace_back(std::move(name), std::move(t));
  }
  return data;
}

/// A training run frozen at some step.
template <class T>
struct TrainingState {
  RunConfig config;
  std::int64_t step = 0;
  Encoder<T> model;
  OptimizerState<T> optimizer;
};

template <class T>
void save_training_checkpoint(const std::string& path, const RunConfig& cfg, const Encoder<T>& model,
                              const OptimizerState<T>& opt) {
  CheckpointData<T> data;
  data.config_text = to_ini(cfg) + "\n[state]\nstep = " + std::to_string(opt.step) + "\n";
  model.params().for_each([&](const std::string& name, const Tensor<T>& t) {
    Tensor<T> copy(t.shape, t.values);
    data.tensors.emplace_back(name, std::move(copy));
  });
  for (std::size_t i = 0; i < opt.names.size(); ++i) {
    data.tensors.emplace_back("optim.m/" + opt.names[i], Tensor<T>(opt.m[i].shape, opt.m[i].values));
    data.tensors.emplace_back("optim.v/" + opt.names[i], Tensor<T>(opt.v[i].shape, opt.v[i].values));
  }
  write_checkpoint(path, data);
}

template <class T>
TrainingState<T> load_training_checkpoint(const std::string& path) {
  CheckpointData<T> data = read_checkpoint<T>(path);
  const IniDoc doc = parse_ini(data.config_text, path);
  TrainingState<T> st;
  st.config = config_from_ini(doc, RunConfig{}, {"state"});
  if (auto it = doc.find("state"); it != doc.end()) {
    for (const auto& [k, v] : it->second) {
      if (k == "step") st.step = std::stoll(v);
    }
  }
  std::map<std::string, Tensor<T>*> by_name;
  for (auto& [name, t] : data.tensors) by_name[name] = &t;

  Rng unused(0);
  ModelParams<T> params = init_params<T>(st.config.model, unused);
  params.for_each([&](const std::string& name, Tensor<T>& t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) fail(ErrorKind::compatibility, path + ": missing tensor " + name);
    if (it->second->shape != t.shape) {
      fail(ErrorKind::compatibility, path + ": tensor " + name + " has shape " +
                                         shape_str(it->second->shape) + ", config expects " +
                                         shape_str(t.shape));
    }
    t.values = std::move(it->second->values);
  });
  st.model = Encoder<T>(st.config.model, std::move(params));

  st.optimizer.weight_decay = st.config.train.weight_decay;
  st.optimizer.step = st.step;
  for (auto& [name, value] : named_params(st.model.params())) {
    auto m = by_name.find("optim.m/" + name);
    auto v = by_name.find("optim.v/" + name);
    if (m == by_name.end() || v == by_name.end()) {
      if (st.step > 0) fail(ErrorKind::compatibility, path + ": missing optimizer moments for " + name);
      st.optimizer.names.clear();
      st.optimizer.m.clear();
      st.optimizer.v.clear();
      break;
    }
    st.optimizer.names.push_back(name);
    st.optimizer.m.push_back(std::move(*m->second));
    st.optimizer.v.push_back(std::move(*v->second));
  }
  return st;
}

}  // namespace simplexdiff
