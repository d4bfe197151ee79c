#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ifan/tensor.hpp"

namespace ifan {

// Parameter registry in creation order: (dotted name, tensor handle).
using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// Binary checkpoint: magic "IFAN", version u32, then one record per
// parameter: name length u32, UTF-8 name, rank u32, dims u32 x rank,
// little-endian f64 payload. Records are read until EOF.
void save_checkpoint(const std::string& path, const NamedParams& params);
NamedParams load_checkpoint(const std::string& path);

// Copies values from a loaded checkpoint into an existing registry, matching
// by name. Throws IoError when a registered name is missing or shaped wrong.
void assign_params(NamedParams& dst, const NamedParams& loaded);

// FNV-1a over (name, raw f64 bytes) of the selected parameters, sorted by
// name. Empty filter selects everything.
std::uint64_t hash_params(const NamedParams& params,
                          const std::vector<std::string>& name_filter = {});

}  // namespace ifan
