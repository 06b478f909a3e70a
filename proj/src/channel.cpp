#include "semcom/channel.hpp"

#include "semcom/rng.hpp"

namespace semcom {

ChannelMode parse_channel_mode(const std::string& s) {
  if (s == "ideal") return ChannelMode::ideal;
  if (s == "awgn") return ChannelMode::awgn;
  throw ContractError("unknown channel mode '" + s + "'");
}

const char* channel_mode_name(ChannelMode m) { return m == ChannelMode::ideal ? "ideal" : "awgn"; }

Latent transmit(const ChannelConfig& config, const Latent& latent, std::uint64_t index) {
  if (config.mode == ChannelMode::ideal) return latent;
  if (!(config.sigma >= 0.0)) throw ContractError("channel sigma must be non-negative");
  if (latent.kind == LatentKind::quantized) {
    throw ContractError("awgn channel cannot carry a quantized latent");
  }
  Latent out = latent;
  if (config.sigma == 0.0) return out;
  Rng rng(Rng::derive(config.seed, 0xc4a77e1, index));
  for (auto& v : out.values) v = static_cast<float>(v + config.sigma * rng.normal());
  return out;
}

}  // namespace semcom
