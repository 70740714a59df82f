#pragma once

// Binary checkpoint: magic, format version, architecture descriptor, then
// named flat arrays of little-endian float32, with a trailing CRC32.

#include <cstdint>
#include <string>

#include "genloop/nn.hpp"

namespace genloop::nn {

struct CheckpointMeta {
  std::string arch;
  long long step = 0;
};

void save_checkpoint(const std::string& path, const std::string& arch,
                     const ParamSet& params);

// Throws IntegrityError on checksum mismatch, DataError on malformed files.
CheckpointMeta load_checkpoint(const std::string& path, ParamSet& params);

// CRC32 of a whole file (manifest bookkeeping).
uint32_t file_crc32(const std::string& path);
uint32_t string_crc32(const std::string& text);

}  // namespace genloop::nn
