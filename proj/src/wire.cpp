#include "semcom/wire.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <thread>

#include "json.hpp"
#include "semcom/bytes.hpp"

namespace semcom {

const char* frame_error_name(FrameErrorKind kind) {
  switch (kind) {
    case FrameErrorKind::truncated: return "truncated";
    case FrameErrorKind::trailing_bytes: return "trailing_bytes";
    case FrameErrorKind::bad_magic: return "bad_magic";
    case FrameErrorKind::bad_version: return "bad_version";
    case FrameErrorKind::bad_flags: return "bad_flags";
    case FrameErrorKind::length_mismatch: return "length_mismatch";
    case FrameErrorKind::crc_mismatch: return "crc_mismatch";
    case FrameErrorKind::bad_payload: return "bad_payload";
  }
  return "unknown";
}

std::uint32_t crc32(std::string_view bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  c = ::crc32(c, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(c);
}

std::string encode_frame(const Latent& z) {
  const bool q = z.kind == LatentKind::quantized;
  const std::size_t n = z.length();
  if (n == 0 || n > 65535) throw ContractError("encode_frame: latent length must be 1..65535");
  std::string out;
  out.reserve(kFrameOverhead + n * 4);
  out += "SCLF";
  out.push_back(static_cast<char>(kFrameVersion));
  out.push_back(static_cast<char>(q ? 1 : 0));
  bytes::put_uint<std::uint16_t>(out, z.codec_id);
  bytes::put_uint<std::uint16_t>(out, static_cast<std::uint16_t>(n));
  bytes::put_uint<std::uint32_t>(out, static_cast<std::uint32_t>(n * (q ? 2 : 4)));
  if (q) {
    for (auto k : z.indices) bytes::put_uint<std::uint16_t>(out, k);
  } else {
    for (float v : z.values) {
      if (!std::isfinite(v)) throw NonFiniteError("encode_frame: non-finite latent value");
      bytes::put_f32(out, v);
    }
  }
  bytes::put_uint<std::uint32_t>(out, crc32(out));
  return out;
}

Latent decode_frame(std::string_view b) {
  using K = FrameErrorKind;
  if (b.size() < kFrameOverhead) throw FrameError(K::truncated, "frame shorter than header and crc");
  const auto* p = reinterpret_cast<const unsigned char*>(b.data());
  if (b.substr(0, 4) != "SCLF") throw FrameError(K::bad_magic, "bad frame magic");
  if (p[4] != kFrameVersion) throw FrameError(K::bad_version, "unsupported frame version " + std::to_string(p[4]));
  if ((p[5] & ~1u) != 0) throw FrameError(K::bad_flags, "unknown frame flags");
  const bool q = p[5] & 1u;
  const auto codec_id = bytes::get_uint<std::uint16_t>(p + 6);
  const auto n = bytes::get_uint<std::uint16_t>(p + 8);
  const auto payload_len = bytes::get_uint<std::uint32_t>(p + 10);
  if (n == 0 || payload_len != std::uint32_t(n) * (q ? 2u : 4u)) {
    throw FrameError(K::length_mismatch, "payload_len does not match dim_or_len");
  }
  const std::size_t total = kFrameOverhead + payload_len;
  if (b.size() < total) throw FrameError(K::truncated, "frame shorter than its declared payload");
  if (b.size() > total) throw FrameError(K::trailing_bytes, "bytes after the frame crc");
  const std::size_t body = kFrameHeaderSize + payload_len;
  if (crc32(b.substr(0, body)) != bytes::get_uint<std::uint32_t>(p + body)) {
    throw FrameError(K::crc_mismatch, "frame crc does not verify");
  }
  const unsigned char* pay = p + kFrameHeaderSize;
  if (q) {
    std::vector<std::uint16_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = bytes::get_uint<std::uint16_t>(pay + 2 * i);
    return Latent::quantized(codec_id, std::move(idx));
  }
  std::vector<float> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = bytes::get_f32(pay + 4 * i);
    if (!std::isfinite(v[i])) throw FrameError(K::bad_payload, "non-finite value in frame payload");
  }
  return Latent::continuous(codec_id, std::move(v));
}

std::string length_prefixed(std::string_view frame) {
  std::string out;
  out.reserve(4 + frame.size());
  bytes::put_uint<std::uint32_t>(out, static_cast<std::uint32_t>(frame.size()));
  out += frame;
  return out;
}

void FrameReader::feed(std::string_view chunk) {
  if (offset_ > 0 && offset_ * 2 > buffer_.size()) {
    buffer_.erase(0, offset_);
    offset_ = 0;
  }
  buffer_ += chunk;
}

std::optional<std::string> FrameReader::next() {
  if (buffered() < 4) return std::nullopt;
  const auto len = bytes::get_uint<std::uint32_t>(bytes::data(buffer_) + offset_);
  if (len > kMaxFrameSize) throw IoError("stream desynchronized: frame length " + std::to_string(len));
  if (buffered() < 4 + std::size_t(len)) return std::nullopt;
  std::string frame = buffer_.substr(offset_ + 4, len);
  offset_ += 4 + len;
  return frame;
}

// ---------------------------------------------------------------- transport

Endpoint parse_endpoint(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == s.size()) {
    throw ContractError("endpoint must be host:port, got '" + s + "'");
  }
  const std::string port = s.substr(colon + 1);
  if (!std::all_of(port.begin(), port.end(), [](char c) { return c >= '0' && c <= '9'; }) || port.size() > 5 ||
      std::stoul(port) > 65535) {
    throw ContractError("bad port in endpoint '" + s + "'");
  }
  return {s.substr(0, colon), static_cast<std::uint16_t>(std::stoul(port))};
}

namespace {

[[noreturn]] void throw_errno(const std::string& what) {
  throw IoError(what + ": " + std::strerror(errno));
}

sockaddr_in resolve(const Endpoint& e) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (const int rc = ::getaddrinfo(e.host.c_str(), nullptr, &hints, &res); rc != 0 || !res) {
    throw IoError("cannot resolve '" + e.host + "': " + ::gai_strerror(rc));
  }
  sockaddr_in addr = *reinterpret_cast<sockaddr_in*>(res->ai_addr);
  ::freeaddrinfo(res);
  addr.sin_port = htons(e.port);
  return addr;
}

}  // namespace

Socket& Socket::operator=(Socket&& other) noexcept {
  if (this != &other) {
    if (fd_ >= 0) ::close(fd_);
    fd_ = std::exchange(other.fd_, -1);
  }
  return *this;
}

Socket::~Socket() {
  if (fd_ >= 0) ::close(fd_);
}

void Socket::send_all(std::string_view bytes) {
  while (!bytes.empty()) {
    const ssize_t n = ::send(fd_, bytes.data(), bytes.size(), MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw_errno("send");
    }
    bytes.remove_prefix(std::size_t(n));
  }
}

std::size_t Socket::receive(char* buf, std::size_t n) {
  for (;;) {
    const ssize_t r = ::recv(fd_, buf, n, 0);
    if (r >= 0) return std::size_t(r);
    if (errno == EINTR) continue;
    if (errno == EAGAIN || errno == EWOULDBLOCK) throw IoError("receive timed out");
    throw_errno("recv");
  }
}

void Socket::shutdown_write() {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_WR);
}

void Socket::set_timeout(std::chrono::milliseconds timeout) {
  timeval tv{};
  tv.tv_sec = timeout.count() / 1000;
  tv.tv_usec = (timeout.count() % 1000) * 1000;
  ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  ::setsockopt(fd_, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
}

Listener::Listener(const Endpoint& at) {
  sock_ = Socket(::socket(AF_INET, SOCK_STREAM, 0));
  if (!sock_.valid()) throw_errno("socket");
  const int one = 1;
  ::setsockopt(sock_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr = resolve(at);
  if (::bind(sock_.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) throw_errno("bind " + at.str());
  if (::listen(sock_.fd(), 4) != 0) throw_errno("listen");
  socklen_t len = sizeof addr;
  ::getsockname(sock_.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
  bound_ = {at.host, ntohs(addr.sin_port)};
}

Socket Listener::accept(std::chrono::milliseconds timeout) {
  pollfd pfd{sock_.fd(), POLLIN, 0};
  int rc = 0;
  do {
    rc = ::poll(&pfd, 1, int(timeout.count()));
  } while (rc < 0 && errno == EINTR);
  if (rc < 0) throw_errno("poll");
  if (rc == 0) throw IoError("no connection on " + bound_.str() + " before the timeout");
  Socket s(::accept(sock_.fd(), nullptr, nullptr));
  if (!s.valid()) throw_errno("accept");
  s.set_timeout(kIoTimeout);
  return s;
}

Socket connect_with_retry(const Endpoint& to, const RetryPolicy& retry) {
  if (retry.attempts < 1) throw ContractError("retry policy needs at least one attempt");
  const sockaddr_in addr = resolve(to);
  auto backoff = retry.initial_backoff;
  std::string last;
  for (int attempt = 1; attempt <= retry.attempts; ++attempt) {
    Socket s(::socket(AF_INET, SOCK_STREAM, 0));
    if (!s.valid()) throw_errno("socket");
    if (::connect(s.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) == 0) {
      const int one = 1;
      ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      s.set_timeout(kIoTimeout);
      return s;
    }
    last = std::strerror(errno);
    if (attempt < retry.attempts) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }
  throw IoError("cannot connect to " + to.str() + " after " + std::to_string(retry.attempts) +
                " attempts: " + last);
}

// -------------------------------------------------------------------- roles

namespace {

void write_stream(Socket& s, const std::string& stream, const SenderConfig& config) {
  if (config.max_write == 0) {
    s.send_all(stream);
    return;
  }
  Rng rng(Rng::derive(config.fragment_seed, 0xf7a9));
  std::string_view rest(stream);
  while (!rest.empty()) {
    const std::size_t n = std::min<std::size_t>(rest.size(), 1 + rng.below(config.max_write));
    s.send_all(rest.substr(0, n));
    rest.remove_prefix(n);
  }
}

}  // namespace

SenderReport send_latents(std::span<const Latent> latents, const SenderConfig& config) {
  SenderReport rep;
  std::string stream;
  for (std::size_t i = 0; i < latents.size(); ++i) {
    std::string frame = encode_frame(latents[i]);
    rep.frames.push_back(frame);
    rep.latents.push_back(latents[i]);
    if (std::find(config.corrupt_frames.begin(), config.corrupt_frames.end(), i) != config.corrupt_frames.end()) {
      frame[kFrameHeaderSize] = static_cast<char>(frame[kFrameHeaderSize] ^ 0x01);
    }
    stream += length_prefixed(frame);
  }
  Socket s = connect_with_retry(config.to, config.retry);
  write_stream(s, stream, config);
  s.shutdown_write();
  // Wait for the peer to close so every byte is consumed before returning.
  char sink[256];
  while (s.receive(sink, sizeof sink) > 0) {
  }
  rep.bytes_written = stream.size();
  return rep;
}

SenderReport run_sender(std::span<const Tensor> images, const CodecModel& codec, const SenderConfig& config) {
  std::vector<Latent> latents;
  latents.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) latents.push_back(transmit(config.channel, codec.encode(images[i]), i));
  return send_latents(latents, config);
}

ReceiverReport run_receiver(Listener& listener, const CodecModel& codec, const ScorerModel* scorer,
                            std::chrono::milliseconds accept_timeout) {
  ReceiverReport rep;
  Socket s = listener.accept(accept_timeout);
  FrameReader reader;
  std::size_t index = 0;
  char buf[4096];
  for (;;) {
    const std::size_t n = s.receive(buf, sizeof buf);
    if (n > 0) reader.feed(std::string_view(buf, n));
    while (auto frame = reader.next()) {
      try {
        Latent z = decode_frame(*frame);
        if (z.codec_id != static_cast<std::uint16_t>(codec.id())) {
          throw CodecMismatchError("receiver: frame " + std::to_string(index) + " carries codec_id " +
                                   std::to_string(z.codec_id) + ", expected " +
                                   std::to_string(static_cast<int>(codec.id())));
        }
        Tensor img = codec.decode(z);
        if (scorer) rep.classes.push_back(scorer->classify(img));
        rep.images.push_back(std::move(img));
        rep.latents.push_back(std::move(z));
        rep.frames.push_back(std::move(*frame));
        rep.accepted_indices.push_back(index);
      } catch (const FrameError& e) {
        rep.rejections.push_back({index, e.kind(), e.what()});
      }
      ++index;
    }
    if (n == 0) break;
  }
  if (reader.buffered() > 0) {
    rep.rejections.push_back({index, FrameErrorKind::truncated, "stream ended inside a frame"});
  }
  return rep;
}

MitmMode parse_mitm_mode(const std::string& s) {
  if (s == "passthrough") return MitmMode::passthrough;
  if (s == "noise") return MitmMode::noise;
  if (s == "ttalm") return MitmMode::ttalm;
  if (s == "dir") return MitmMode::dir;
  throw ContractError("unknown proxy mode '" + s + "'");
}

const char* mitm_mode_name(MitmMode m) {
  switch (m) {
    case MitmMode::passthrough: return "passthrough";
    case MitmMode::noise: return "noise";
    case MitmMode::ttalm: return "ttalm";
    case MitmMode::dir: return "dir";
  }
  return "unknown";
}

void MitmPolicy::validate() const {
  if (mode == MitmMode::passthrough) return;
  if (!codec || !codec->frozen()) throw ModelStateError("proxy: attack modes need a frozen codec");
  if (!scorer || !scorer->frozen()) throw ModelStateError("proxy: attack modes need a frozen scorer");
  switch (mode) {
    case MitmMode::noise:
      if (!(sigma >= 0.0)) throw ContractError("proxy: noise sigma must be >= 0");
      break;
    case MitmMode::ttalm:
      if (!stats) throw ContractError("proxy: ttalm needs latent statistics");
      if (stats->dim != codec->latent_dim()) throw CodecMismatchError("proxy: statistics fit for another codec");
      break;
    case MitmMode::dir:
      if (!denoiser || !denoiser->frozen()) throw ModelStateError("proxy: dir needs a frozen denoiser");
      if (denoiser->latent_dim() != codec->latent_dim()) {
        throw CodecMismatchError("proxy: denoiser trained for another codec");
      }
      if (!(strength > 0.0 && strength <= 1.0)) throw ContractError("proxy: strength must lie in (0, 1]");
      break;
    case MitmMode::passthrough: break;
  }
}

AppliedAttack apply_policy(const MitmPolicy& policy, const Latent& z, std::size_t index, AttackTrace* trace) {
  AppliedAttack out{z, -1, -1, 0.0};
  if (policy.mode == MitmMode::passthrough) return out;
  const CodecModel& codec = *policy.codec;
  out.clean_class = policy.scorer->classify(codec.decode(z));
  out.target = choose_target(policy.target, out.clean_class, index);
  switch (policy.mode) {
    case MitmMode::noise: out.latent = noise_baseline(z, codec, policy.sigma, policy.seed, index); break;
    case MitmMode::ttalm: {
      TtaConfig c = policy.tta;
      c.target = out.target;
      AttackResult r = tta_attack_any(z, codec, *policy.scorer, *policy.stats, c);
      out.latent = std::move(r.latent);
      if (trace) *trace = std::move(r.trace);
      break;
    }
    case MitmMode::dir:
      out.latent = dir_attack(z, codec, *policy.denoiser, out.target, policy.strength, policy.seed, index);
      break;
    case MitmMode::passthrough: break;
  }
  const auto a = codec.decoder_input(z), b = codec.decoder_input(out.latent);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::pow(double(b[i]) - a[i], 2);
  out.perturbation_norm = std::sqrt(s);
  return out;
}

std::string mitm_record_json(const MitmRecord& r, MitmMode mode) {
  nlohmann::ordered_json j;
  j["frame"] = r.index;
  j["mode"] = mitm_mode_name(mode);
  j["status"] = r.status;
  if (!r.error.empty()) j["error"] = r.error;
  if (r.target >= 0) {
    j["clean_class"] = r.clean_class;
    j["target"] = r.target;
  }
  j["perturbation_norm"] = r.perturbation_norm;
  j["latency_us"] = r.latency_us;
  return j.dump();
}

namespace {

// Relays raw bytes until EOF on `from`, then half-closes `to`.
void relay_raw(Socket& from, Socket& to) {
  char buf[4096];
  try {
    for (;;) {
      const std::size_t n = from.receive(buf, sizeof buf);
      if (n == 0) break;
      to.send_all(std::string_view(buf, n));
    }
  } catch (const IoError&) {
  }
  to.shutdown_write();
}

}  // namespace

std::vector<MitmRecord> run_mitm(Listener& listener, const Endpoint& forward, const MitmPolicy& policy,
                                 std::ostream* log, std::chrono::milliseconds accept_timeout) {
  policy.validate();
  Socket client = listener.accept(accept_timeout);
  Socket upstream = connect_with_retry(forward);
  std::thread back([&] { relay_raw(upstream, client); });

  std::vector<MitmRecord> records;
  std::exception_ptr failure;
  try {
    FrameReader reader;
    std::size_t index = 0;
    char buf[4096];
    for (;;) {
      const std::size_t n = client.receive(buf, sizeof buf);
      if (n > 0) reader.feed(std::string_view(buf, n));
      while (auto frame = reader.next()) {
        const auto t0 = std::chrono::steady_clock::now();
        MitmRecord rec;
        rec.index = index;
        std::string out;
        if (policy.mode == MitmMode::passthrough) {
          rec.status = "forwarded";
          try {
            decode_frame(*frame);
          } catch (const FrameError& e) {
            rec.error = frame_error_name(e.kind());
          }
          out = std::move(*frame);
        } else {
          try {
            const Latent z = decode_frame(*frame);
            if (z.codec_id != static_cast<std::uint16_t>(policy.codec->id())) {
              rec.status = "skipped";
              rec.error = "codec_id mismatch";
              out = std::move(*frame);
            } else {
              const AppliedAttack a = apply_policy(policy, z, index);
              rec.status = "attacked";
              rec.clean_class = a.clean_class;
              rec.target = a.target;
              rec.perturbation_norm = a.perturbation_norm;
              out = encode_frame(a.latent);
            }
          } catch (const FrameError& e) {
            rec.status = "dropped";
            rec.error = frame_error_name(e.kind());
          }
        }
        if (!out.empty()) upstream.send_all(length_prefixed(out));
        rec.latency_us =
            std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
        if (log) *log << mitm_record_json(rec, policy.mode) << '\n';
        records.push_back(std::move(rec));
        ++index;
      }
      if (n == 0) break;
    }
  } catch (...) {
    failure = std::current_exception();
  }
  upstream.shutdown_write();
  back.join();
  if (log) log->flush();
  if (failure) std::rethrow_exception(failure);
  return records;
}

}  // namespace semcom
