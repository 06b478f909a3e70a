#pragma once

#include <cstdint>
#include <string>

#include "semcom/codec.hpp"

namespace semcom {

enum class ChannelMode { ideal, awgn };

struct ChannelConfig {
  ChannelMode mode = ChannelMode::ideal;
  double sigma = 0.0;  // noise standard deviation in latent units; ignored when ideal
  std::uint64_t seed = 0;
};

ChannelMode parse_channel_mode(const std::string& s);
const char* channel_mode_name(ChannelMode m);

// Applies the link to one latent. `index` selects an independent noise
// stream so a sequence of transmissions is reproducible from the seed alone.
// AWGN on a quantized latent is an error.
Latent transmit(const ChannelConfig& config, const Latent& latent, std::uint64_t index = 0);

}  // namespace semcom
