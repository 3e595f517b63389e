#pragma once
// Checkpoint container: the model's config text plus every named parameter's
// raw values. Self-describing, so a checkpoint alone rebuilds the model.
// Values are stored in the host byte order; checkpoints are an artifact of a
// single machine, not an interchange format.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "glimpse/model.hpp"

namespace glimpse {

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'G', 'L', 'C', 'K', '1', '\n', 0, 0};

inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint64_t read_u64(std::istream& is, const std::string& what) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw DataError("checkpoint: truncated at " + what);
  return v;
}

}  // namespace detail

template <class T>
void save_checkpoint(std::ostream& os, const MaeModel<T>& model) {
  os.write(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic);
  detail::write_u64(os, sizeof(T));
  const std::string cfg = model.config().to_kv();
  detail::write_u64(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  detail::write_u64(os, model.params().size());
  for (const auto& [name, p] : model.params()) {
    detail::write_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u64(os, p.data().size());
    os.write(reinterpret_cast<const char*>(p.data().data()),
             static_cast<std::streamsize>(p.data().size() * sizeof(T)));
  }
  if (!os) throw DataError("checkpoint: write failed");
}

template <class T>
void save_checkpoint(const std::string& path, const MaeModel<T>& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint: cannot write " + path);
  save_checkpoint(os, model);
}

namespace detail {

template <class T>
std::vector<std::pair<std::string, std::vector<T>>> read_checkpoint_params(
    std::istream& is, std::string& config_text) {
  char magic[sizeof kCheckpointMagic];
  if (!is.read(magic, sizeof magic) ||
      !std::equal(magic, magic + sizeof magic, kCheckpointMagic))
    throw DataError("checkpoint: bad magic");
  if (read_u64(is, "scalar width") != sizeof(T))
    throw DataError("checkpoint: scalar width does not match this build");
  const std::uint64_t cfg_len = read_u64(is, "config length");
  config_text.resize(cfg_len);
  if (!is.read(config_text.data(), static_cast<std::streamsize>(cfg_len)))
    throw DataError("checkpoint: truncated config");
  const std::uint64_t n = read_u64(is, "parameter count");
  std::vector<std::pair<std::string, std::vector<T>>> params(n);
  for (auto& [name, vals] : params) {
    name.resize(read_u64(is, "name length"));
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size())))
      throw DataError("checkpoint: truncated name");
    vals.resize(read_u64(is, "value count"));
    if (!is.read(reinterpret_cast<char*>(vals.data()),
                 static_cast<std::streamsize>(vals.size() * sizeof(T))))
      throw DataError("checkpoint: truncated values for " + name);
  }
  return params;
}

}  // namespace detail

// Rebuilds the model the checkpoint describes.
template <class T>
MaeModel<T> load_checkpoint(std::istream& is) {
  std::string cfg_text;
  auto stored = detail::read_checkpoint_params<T>(is, cfg_text);
  MaeModel<T> model(ModelConfig::from_kv(cfg_text));
  auto& params = model.params_mut();
  if (stored.size() != params.size())
    throw DataError("checkpoint: " + std::to_string(stored.size()) + " parameters for a model with " +
                    std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (stored[i].first != params[i].first)
      throw DataError("checkpoint: parameter '" + stored[i].first + "' where '" +
                      params[i].first + "' was expected");
    if (stored[i].second.size() != params[i].second.data().size())
      throw DataError("checkpoint: size mismatch for " + stored[i].first);
    params[i].second.data() = std::move(stored[i].second);
  }
  return model;
}

template <class T>
MaeModel<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot read " + path);
  return load_checkpoint<T>(is);
}

// Copies stored values into an existing model wherever name and size match;
// everything else keeps its current initialization. Returns how many
// parameters were copied. This is the warm start used when a reconstruction
// checkpoint seeds a classifier.
template <class T>
std::size_t load_weights_into(MaeModel<T>& model, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot read " + path);
  std::string cfg_text;
  auto stored = detail::read_checkpoint_params<T>(is, cfg_text);
  std::size_t copied = 0;
  for (auto& [name, p] : model.params_mut()) {
    for (auto& [sname, svals] : stored) {
      if (sname == name && svals.size() == p.data().size()) {
        p.data() = svals;
        ++copied;
        break;
      }
    }
  }
  if (copied == 0) throw DataError("checkpoint: no parameter of " + path + " fits this model");
  return copied;
}

}  // namespace glimpse
