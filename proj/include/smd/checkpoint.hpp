#pragma once

#include <filesystem>
#include <string>

#include "smd/config.hpp"
#include "smd/nets.hpp"

namespace smd::nets {

// Checkpoint file layout:
//
//   SMDCKPT 1
//   net <n>            followed by n `key = value` lines (NetConfig)
//   train <m>          followed by m `key = value` lines (training config)
//   tensors <t>        followed by t lines `<name> f32 <ndim> <d0> ... <dk>`
//   payload
//   <little-endian float32 data of every tensor, in index order>
//
// Tensor names are `<group>.<parameter path>`.
struct Checkpoint {
  Networks networks;
  KeyValueConfig train_config;
};

KeyValueConfig net_config_to_kv(const NetConfig& cfg);
NetConfig net_config_from_kv(const KeyValueConfig& kv);

std::string encode_checkpoint(const Networks& nets, const KeyValueConfig& train_config);
void save_checkpoint(const std::filesystem::path& path, const Networks& nets,
                     const KeyValueConfig& train_config);

// Rebuilds the architecture from the stored NetConfig and validates every
// tensor name and shape against it before copying values.
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint decode_checkpoint(const std::string& bytes);

// Load tensors into an already constructed architecture.
void load_into(Networks& nets, const std::filesystem::path& path);

}  // namespace smd::nets
