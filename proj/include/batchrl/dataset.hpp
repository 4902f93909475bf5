#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "batchrl/rng.hpp"

namespace batchrl {

// One experience tuple. `done` marks true termination only; truncated
// episodes keep done=false so the bootstrap is not cut.
struct Transition {
  std::vector<double> state;
  int action = 0;
  double reward = 0.0;
  std::vector<double> next_state;
  bool done = false;

  bool operator==(const Transition&) const = default;
};

// Recovers the tabular state id from a one-hot observation, or -1 when the
// observation is not one-hot.
inline int one_hot_state(const std::vector<double>& obs) {
  int id = -1;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (obs[i] == 1.0) {
      if (id >= 0) return -1;
      id = static_cast<int>(i);
    } else if (obs[i] != 0.0) {
      return -1;
    }
  }
  return id;
}

// Immutable fixed batch: the only data source for offline agents.
struct BatchDataset {
  std::string env_name;
  std::string behavioral_policy_descriptor;
  std::uint64_t seed = 0;
  int num_actions = 0;
  std::vector<Transition> transitions;
  // Exact n(s,a) over one-hot state ids; empty when observations are not
  // tabular.
  std::vector<std::uint64_t> counts;

  int obs_dim() const {
    return transitions.empty() ? 0 : static_cast<int>(transitions[0].state.size());
  }

  std::uint64_t count(int s, int a) const {
    return counts[static_cast<std::size_t>(s) * num_actions + a];
  }

  bool operator==(const BatchDataset&) const = default;
};

// Exact visit counts n(s,a); requires one-hot observations.
inline std::vector<std::uint64_t> state_action_counts(
    const std::vector<Transition>& transitions, int num_states,
    int num_actions) {
  std::vector<std::uint64_t> counts(
      static_cast<std::size_t>(num_states) * num_actions, 0);
  for (const Transition& t : transitions) {
    const int s = one_hot_state(t.state);
    if (s < 0 || s >= num_states) {
      throw std::runtime_error(
          "state_action_counts: observations are not one-hot; counts "
          "unsupported for this environment");
    }
    counts[static_cast<std::size_t>(s) * num_actions + t.action] += 1;
  }
  return counts;
}

inline std::vector<std::uint64_t> state_action_counts(const BatchDataset& data) {
  return state_action_counts(data.transitions, data.obs_dim(), data.num_actions);
}

// Uniform sampling with replacement.
inline std::vector<const Transition*> sample_minibatch(
    const BatchDataset& data, std::size_t size, Rng& rng) {
  if (data.transitions.empty()) {
    throw std::invalid_argument("sample_minibatch: empty dataset");
  }
  std::vector<const Transition*> batch;
  batch.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    batch.push_back(&data.transitions[rng.uniform_int(data.transitions.size())]);
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Binary dataset format ("BRLB"): fixed header then packed little-endian
// records. Errors name the byte offset of the failure.
// ---------------------------------------------------------------------------

namespace dataset_detail {

inline void fail_at(const std::string& what, std::uint64_t offset) {
  throw std::runtime_error("dataset format error at byte offset " +
                           std::to_string(offset) + ": " + what);
}

template <typename T>
T read_at(std::istream& in, std::uint64_t& offset, const std::string& what) {
  T value;
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) fail_at("truncated while reading " + what, offset);
  offset += sizeof(T);
  return value;
}

template <typename T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

}  // namespace dataset_detail

inline void save_dataset(const BatchDataset& data, const std::string& path) {
  using dataset_detail::write_pod;
  if (data.transitions.empty()) {
    throw std::invalid_argument("save_dataset: refusing to write empty dataset");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_dataset: cannot open " + path);
  out.write("BRLB", 4);
  write_pod<std::uint32_t>(out, 1);  // version
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(data.env_name.size()));
  out.write(data.env_name.data(), static_cast<std::streamsize>(data.env_name.size()));
  write_pod<std::uint32_t>(out,
                           static_cast<std::uint32_t>(data.behavioral_policy_descriptor.size()));
  out.write(data.behavioral_policy_descriptor.data(),
            static_cast<std::streamsize>(data.behavioral_policy_descriptor.size()));
  write_pod<std::uint64_t>(out, data.seed);
  write_pod<std::uint64_t>(out, data.transitions.size());
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(data.obs_dim()));
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(data.num_actions));
  for (const Transition& t : data.transitions) {
    out.write(reinterpret_cast<const char*>(t.state.data()),
              static_cast<std::streamsize>(t.state.size() * sizeof(double)));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.action));
    write_pod<double>(out, t.reward);
    out.write(reinterpret_cast<const char*>(t.next_state.data()),
              static_cast<std::streamsize>(t.next_state.size() * sizeof(double)));
    write_pod<std::uint8_t>(out, t.done ? 1 : 0);
  }
  if (!out) throw std::runtime_error("save_dataset: write failed for " + path);
}

inline BatchDataset load_dataset(const std::string& path) {
  using dataset_detail::fail_at;
  using dataset_detail::read_at;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
  std::uint64_t offset = 0;
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "BRLB", 4) != 0) fail_at("bad magic", 0);
  offset += 4;
  const auto version = read_at<std::uint32_t>(in, offset, "version");
  if (version != 1) fail_at("unsupported version", offset - 4);

  BatchDataset data;
  const auto name_len = read_at<std::uint32_t>(in, offset, "env name length");
  data.env_name.resize(name_len);
  in.read(data.env_name.data(), name_len);
  if (!in) fail_at("truncated env name", offset);
  offset += name_len;
  const auto desc_len = read_at<std::uint32_t>(in, offset, "descriptor length");
  data.behavioral_policy_descriptor.resize(desc_len);
  in.read(data.behavioral_policy_descriptor.data(), desc_len);
  if (!in) fail_at("truncated descriptor", offset);
  offset += desc_len;
  data.seed = read_at<std::uint64_t>(in, offset, "seed");
  const auto count = read_at<std::uint64_t>(in, offset, "transition count");
  if (count == 0) fail_at("empty dataset", offset - 8);
  const auto obs_dim = read_at<std::uint32_t>(in, offset, "observation dim");
  data.num_actions = static_cast<int>(read_at<std::uint32_t>(in, offset, "action count"));

  data.transitions.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Transition& t = data.transitions[i];
    t.state.resize(obs_dim);
    in.read(reinterpret_cast<char*>(t.state.data()),
            static_cast<std::streamsize>(obs_dim * sizeof(double)));
    if (!in) fail_at("truncated state in record " + std::to_string(i), offset);
    offset += obs_dim * sizeof(double);
    t.action = static_cast<int>(read_at<std::uint32_t>(in, offset, "action"));
    if (t.action < 0 || t.action >= data.num_actions) {
      fail_at("action index out of range in record " + std::to_string(i),
              offset - 4);
    }
    t.reward = read_at<double>(in, offset, "reward");
    t.next_state.resize(obs_dim);
    in.read(reinterpret_cast<char*>(t.next_state.data()),
            static_cast<std::streamsize>(obs_dim * sizeof(double)));
    if (!in) fail_at("truncated next state in record " + std::to_string(i), offset);
    offset += obs_dim * sizeof(double);
    t.done = read_at<std::uint8_t>(in, offset, "done flag") != 0;
  }
  in.peek();
  if (!in.eof()) fail_at("trailing bytes after declared transition count", offset);
  if (one_hot_state(data.transitions[0].state) >= 0) {
    data.counts = state_action_counts(data.transitions,
                                      static_cast<int>(obs_dim), data.num_actions);
  }
  return data;
}

}  // namespace batchrl
