#include "semcom/checkpoint.hpp"

#include <fstream>
#include <iterator>
#include <sstream>

#include "semcom/bytes.hpp"

namespace semcom {

namespace {

constexpr const char* kHeader = "SEMCOM-CKPT 1";

bool valid_token(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (c == ' ' || c == '\n' || c == '\r' || c == '\t') return false;
  }
  return true;
}

}  // namespace

void Checkpoint::check_name(const std::string& name) const {
  if (!valid_token(name)) throw CheckpointError("invalid tensor name '" + name + "'");
  if (tensors_.count(name)) throw CheckpointError("duplicate tensor name '" + name + "'");
}

void Checkpoint::put(const std::string& name, Tensor t) {
  check_name(name);
  order_.push_back(name);
  tensors_.emplace(name, std::move(t));
}

void Checkpoint::put(const std::string& name, TensorD t) {
  check_name(name);
  order_.push_back(name);
  tensors_.emplace(name, std::move(t));
}

void Checkpoint::put_meta(const std::string& key, const std::string& value) {
  if (!valid_token(key)) throw CheckpointError("invalid meta key '" + key + "'");
  if (value.find('\n') != std::string::npos) throw CheckpointError("meta value contains newline");
  for (auto& kv : meta_) {
    if (kv.first == key) {
      kv.second = value;
      return;
    }
  }
  meta_.emplace_back(key, value);
}

bool Checkpoint::has(const std::string& name) const { return tensors_.count(name) != 0; }

const Tensor& Checkpoint::tensor(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw CheckpointError("checkpoint has no tensor '" + name + "'");
  if (const Tensor* t = std::get_if<Tensor>(&it->second)) return *t;
  throw CheckpointError("tensor '" + name + "' is not f32");
}

const TensorD& Checkpoint::tensor_f64(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw CheckpointError("checkpoint has no tensor '" + name + "'");
  if (const TensorD* t = std::get_if<TensorD>(&it->second)) return *t;
  throw CheckpointError("tensor '" + name + "' is not f64");
}

bool Checkpoint::has_meta(const std::string& key) const {
  for (const auto& kv : meta_) {
    if (kv.first == key) return true;
  }
  return false;
}

const std::string& Checkpoint::meta(const std::string& key) const {
  for (const auto& kv : meta_) {
    if (kv.first == key) return kv.second;
  }
  throw CheckpointError("checkpoint has no meta key '" + key + "'");
}

std::string Checkpoint::serialize() const {
  std::ostringstream manifest;
  manifest << kHeader << '\n';
  for (const auto& [k, v] : meta_) manifest << "meta " << k << ' ' << v << '\n';
  for (const auto& name : order_) {
    const Entry& e = tensors_.at(name);
    const Shape& shape = std::visit([](const auto& t) -> const Shape& { return t.shape(); }, e);
    manifest << "tensor " << name << ' ' << (std::holds_alternative<Tensor>(e) ? "f32" : "f64");
    for (std::size_t ext : shape) manifest << ' ' << ext;
    manifest << '\n';
  }
  manifest << "end\n";
  std::string out = manifest.str();
  for (const auto& name : order_) {
    const Entry& e = tensors_.at(name);
    if (const Tensor* t = std::get_if<Tensor>(&e)) {
      for (float x : t->data()) bytes::put_f32(out, x);
    } else {
      for (double x : std::get<TensorD>(e).data()) bytes::put_f64(out, x);
    }
  }
  return out;
}

Checkpoint Checkpoint::parse(const std::string& raw) {
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const std::size_t nl = raw.find('\n', pos);
    if (nl == std::string::npos) throw CheckpointError("corrupt checkpoint: truncated manifest");
    std::string line = raw.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };

  if (next_line() != kHeader) throw CheckpointError("corrupt checkpoint: bad header");

  struct Pending {
    std::string name;
    bool f64;
    Shape shape;
  };
  std::vector<Pending> pending;
  Checkpoint ck;
  std::size_t payload = 0;
  for (;;) {
    const std::string line = next_line();
    if (line == "end") break;
    std::istringstream is(line);
    std::string kind;
    is >> kind;
    if (kind == "meta") {
      std::string key;
      is >> key;
      std::string value;
      std::getline(is, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      if (!valid_token(key)) throw CheckpointError("corrupt checkpoint: bad meta line");
      ck.put_meta(key, value);
    } else if (kind == "tensor") {
      Pending p;
      std::string dtype;
      if (!(is >> p.name >> dtype)) throw CheckpointError("corrupt checkpoint: bad tensor line");
      if (dtype == "f32") {
        p.f64 = false;
      } else if (dtype == "f64") {
        p.f64 = true;
      } else {
        throw CheckpointError("corrupt checkpoint: unknown dtype '" + dtype + "'");
      }
      std::string tok;
      while (is >> tok) {
        if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos ||
            tok.size() > 12) {
          throw CheckpointError("corrupt checkpoint: bad extent '" + tok + "'");
        }
        p.shape.push_back(std::stoull(tok));
      }
      payload += shape_size(p.shape) * (p.f64 ? 8 : 4);
      pending.push_back(std::move(p));
    } else {
      throw CheckpointError("corrupt checkpoint: unknown manifest entry '" + kind + "'");
    }
  }
  if (raw.size() - pos != payload) {
    throw CheckpointError("corrupt checkpoint: payload is " + std::to_string(raw.size() - pos) +
                          " bytes, manifest requires " + std::to_string(payload));
  }
  const unsigned char* p = bytes::data(raw) + pos;
  for (auto& e : pending) {
    const std::size_t n = shape_size(e.shape);
    if (e.f64) {
      std::vector<double> d(n);
      for (std::size_t i = 0; i < n; ++i, p += 8) d[i] = bytes::get_f64(p);
      ck.put(e.name, TensorD(std::move(e.shape), std::move(d)));
    } else {
      std::vector<float> d(n);
      for (std::size_t i = 0; i < n; ++i, p += 4) d[i] = bytes::get_f32(p);
      ck.put(e.name, Tensor(std::move(e.shape), std::move(d)));
    }
  }
  return ck;
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::string& data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void Checkpoint::save(const std::filesystem::path& path) const { write_file_bytes(path, serialize()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) { return parse(read_file_bytes(path)); }

}  // namespace semcom
