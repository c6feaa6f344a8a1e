#pragma once

#include <string>

#include "aimlab/params.hpp"

namespace aimlab {

// `AIMC` container: magic, version u32, tensor count u32, then per tensor a
// length-prefixed name, rank and dims as u64, and raw little-endian float64
// data. Round-trips are bit-exact.
void save_checkpoint(const ParamMap& params, const std::string& path);

// Loads by name into an already-built parameter map; every name must match
// and shapes must agree.
void load_checkpoint(ParamMap& params, const std::string& path);

// Reads a checkpoint into fresh tensors (tooling path).
ParamMap read_checkpoint(const std::string& path);

} // namespace aimlab
