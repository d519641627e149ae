#pragma once

#include <string>

#include "alora/transformer.hpp"

namespace alora {

// Binary checkpoint: text header (magic, version, model config as
// key-value lines, tensor table of name/shape/dtype) followed by raw
// little-endian arrays in table order. Gate states are stored as a byte
// array per adapter; values are always written as f64.
void save_checkpoint(const std::string& path, const SuperNetwork& model);

SuperNetwork load_checkpoint(const std::string& path);

}  // namespace alora
