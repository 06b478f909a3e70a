#pragma once

// Latents on the wire. Frame layout, all integers little-endian:
//
//   offset size  field
//   0      4     magic "SCLF"
//   4      1     version (1)
//   5      1     flags; bit 0 set = quantized, other bits zero
//   6      2     codec_id
//   8      2     dim_or_len: latent dimension, or token count when quantized
//   10     4     payload_len = dim_or_len * (4, or 2 when quantized)
//   14     n     payload: float32 values, or uint16 codeword indices
//   14+n   4     CRC-32 (IEEE 802.3, as zlib) over bytes [0, 14+n)
//
// On a stream every frame is preceded by its 4-byte little-endian length.

#include <chrono>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "semcom/attack_dir.hpp"
#include "semcom/attack_ttalm.hpp"
#include "semcom/channel.hpp"
#include "semcom/codec.hpp"
#include "semcom/detection.hpp"
#include "semcom/scorer.hpp"
#include "semcom/target.hpp"

namespace semcom {

inline constexpr std::size_t kFrameHeaderSize = 14;
inline constexpr std::size_t kFrameOverhead = kFrameHeaderSize + 4;
inline constexpr std::uint8_t kFrameVersion = 1;
inline constexpr std::size_t kMaxFrameSize = kFrameOverhead + 65535 * 4;

enum class FrameErrorKind {
  truncated,        // fewer bytes than the header or the declared payload needs
  trailing_bytes,   // more bytes than the declared payload
  bad_magic,
  bad_version,
  bad_flags,
  length_mismatch,  // payload_len disagrees with dim_or_len, or dim_or_len is 0
  crc_mismatch,
  bad_payload,      // a non-finite float inside a frame whose CRC verifies
};

const char* frame_error_name(FrameErrorKind kind);

class FrameError : public Error {
 public:
  FrameError(FrameErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  FrameErrorKind kind() const { return kind_; }

 private:
  FrameErrorKind kind_;
};

std::uint32_t crc32(std::string_view bytes);

std::string encode_frame(const Latent& z);
Latent decode_frame(std::string_view bytes);

// Stream framing.
std::string length_prefixed(std::string_view frame);

// Reassembles length-prefixed frames from arbitrarily split chunks.
class FrameReader {
 public:
  void feed(std::string_view chunk);
  // Next complete frame body (without prefix), if buffered. Throws IoError
  // when a prefix announces more than kMaxFrameSize bytes, since the stream
  // cannot be resynchronized after that.
  std::optional<std::string> next();
  std::size_t buffered() const { return buffer_.size() - offset_; }

 private:
  std::string buffer_;
  std::size_t offset_ = 0;
};

// Transport.

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  std::string str() const { return host + ":" + std::to_string(port); }
};

// "host:port"; throws ContractError when malformed.
Endpoint parse_endpoint(const std::string& s);

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& other) noexcept : fd_(std::exchange(other.fd_, -1)) {}
  Socket& operator=(Socket&& other) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket();

  bool valid() const { return fd_ >= 0; }
  int fd() const { return fd_; }
  void send_all(std::string_view bytes);
  // Up to n bytes; 0 at end of stream. Throws IoError on failure or timeout.
  std::size_t receive(char* buf, std::size_t n);
  void shutdown_write();
  void set_timeout(std::chrono::milliseconds timeout);

 private:
  int fd_ = -1;
};

// Bound and listening TCP socket; port 0 picks an ephemeral port.
class Listener {
 public:
  explicit Listener(const Endpoint& at);
  Endpoint endpoint() const { return bound_; }
  Socket accept(std::chrono::milliseconds timeout);

 private:
  Socket sock_;
  Endpoint bound_;
};

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds initial_backoff{50};  // doubled after each failure
};

// Throws IoError after the last failed attempt.
Socket connect_with_retry(const Endpoint& to, const RetryPolicy& retry = {});

inline constexpr std::chrono::milliseconds kIoTimeout{60000};

// Roles.

struct SenderConfig {
  Endpoint to;
  ChannelConfig channel;
  RetryPolicy retry;
  // > 0: split the byte stream into random writes of 1..max_write bytes.
  std::size_t max_write = 0;
  std::uint64_t fragment_seed = 1;
  // Frames (by index) whose first payload byte gets one bit flipped after
  // the CRC was computed.
  std::vector<std::size_t> corrupt_frames;
};

struct SenderReport {
  std::vector<Latent> latents;     // as transmitted, after the channel
  std::vector<std::string> frames; // as intended, before any injected corruption
  std::size_t bytes_written = 0;
};

// Encodes each image, passes it through the channel and streams it.
SenderReport run_sender(std::span<const Tensor> images, const CodecModel& codec, const SenderConfig& config);

// Streams pre-built latents unchanged (no channel).
SenderReport send_latents(std::span<const Latent> latents, const SenderConfig& config);

struct Rejection {
  std::size_t index = 0;
  FrameErrorKind kind = FrameErrorKind::crc_mismatch;
  std::string message;
};

struct ReceiverReport {
  std::vector<std::string> frames;  // bodies of accepted frames
  std::vector<std::size_t> accepted_indices;
  std::vector<Latent> latents;
  std::vector<Tensor> images;
  std::vector<int> classes;  // filled when a scorer is given
  std::vector<Rejection> rejections;
};

// Accepts one connection and reads until end of stream. A frame whose
// codec_id differs from the codec's is fatal (CodecMismatchError).
ReceiverReport run_receiver(Listener& listener, const CodecModel& codec, const ScorerModel* scorer = nullptr,
                            std::chrono::milliseconds accept_timeout = kIoTimeout);

enum class MitmMode { passthrough, noise, ttalm, dir };
MitmMode parse_mitm_mode(const std::string& s);
const char* mitm_mode_name(MitmMode m);

struct MitmPolicy {
  MitmMode mode = MitmMode::passthrough;
  double sigma = 0.0;      // noise
  TtaConfig tta;           // ttalm; tta.target is replaced per frame by the rule
  double strength = 0.8;   // dir
  TargetRule target;
  std::uint64_t seed = 0;  // noise and dir streams, keyed by frame index
  const CodecModel* codec = nullptr;
  const ScorerModel* scorer = nullptr;  // picks the clean class; drives ttalm
  const LatentStats* stats = nullptr;   // ttalm regularizer
  const DenoiserModel* denoiser = nullptr;

  // Throws ContractError / ModelStateError when models required by the
  // mode are missing, unfrozen or incompatible.
  void validate() const;
};

struct MitmRecord {
  std::size_t index = 0;
  std::string status;  // "forwarded", "attacked", "dropped", "skipped"
  std::string error;
  int clean_class = -1;
  int target = -1;
  double perturbation_norm = 0.0;
  double latency_us = 0.0;
};

// Offline form of the proxy's per-frame attack, shared by the proxy and the
// harness so both produce identical latents for the same (seed, index).
struct AppliedAttack {
  Latent latent;
  int clean_class = -1;
  int target = -1;
  double perturbation_norm = 0.0;
};
// `trace` receives the TTA-LM loss trace when given.
AppliedAttack apply_policy(const MitmPolicy& policy, const Latent& z, std::size_t index,
                           AttackTrace* trace = nullptr);

// Accepts one client, connects to `forward`, relays both directions until
// both sides close. Frames from the client are handled per policy; the
// reverse direction is relayed raw. Passthrough forwards every frame
// byte-exactly, malformed or not; attack modes drop malformed frames.
// One JSON object per frame is written to `log` when given.
std::vector<MitmRecord> run_mitm(Listener& listener, const Endpoint& forward, const MitmPolicy& policy,
                                 std::ostream* log = nullptr, std::chrono::milliseconds accept_timeout = kIoTimeout);

std::string mitm_record_json(const MitmRecord& r, MitmMode mode);

}  // namespace semcom
