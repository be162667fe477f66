#include "npx/artifacts.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "npx/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace npx {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint codec assumes a little-endian host");

void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64_le(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

json blob_entry(const NamedArray& a, const char* section, std::uint64_t offset) {
  return json{{"name", a.name},
              {"section", section},
              {"shape", a.shape},
              {"offset", offset},
              {"nbytes", static_cast<std::uint64_t>(a.data.size()) * 4}};
}

}  // namespace

std::string to_string(Component c) {
  switch (c) {
    case Component::generator:
      return "generator";
    case Component::discriminator:
      return "discriminator";
    case Component::siamese:
      return "siamese";
  }
  return "unknown";
}

Component component_from_string(const std::string& s) {
  if (s == "generator") return Component::generator;
  if (s == "discriminator") return Component::discriminator;
  if (s == "siamese") return Component::siamese;
  throw ParseError("unknown checkpoint component '" + s + "'");
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  json blobs = json::array();
  std::uint64_t offset = 0;
  std::string payload;
  auto append = [&](const std::vector<NamedArray>& arrays, const char* section) {
    for (const auto& a : arrays) {
      if (shape_numel(a.shape) != a.data.size()) {
        throw ValidationError("array '" + a.name + "' holds " + std::to_string(a.data.size()) +
                              " values for shape " + shape_str(a.shape));
      }
      blobs.push_back(blob_entry(a, section, offset));
      const std::size_t n = a.data.size() * sizeof(float);
      payload.append(reinterpret_cast<const char*>(a.data.data()), n);
      offset += n;
    }
  };
  append(ckpt.params, "params");
  append(ckpt.optimizer, "optimizer");

  const json header{{"format_version", ckpt.format_version},
                    {"component", to_string(ckpt.component)},
                    {"seed", ckpt.seed},
                    {"epoch", ckpt.epoch},
                    {"step", ckpt.step},
                    {"config", ckpt.config},
                    {"optimizer", {{"step_count", ckpt.optimizer_steps}}},
                    {"blobs", blobs}};
  const std::string header_text = header.dump();
  std::string bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  put_u64_le(bytes, header_text.size());
  bytes += header_text;
  bytes += payload;
  write_file_atomic(path, bytes);
}

Checkpoint load_checkpoint(const fs::path& path) {
  const std::string bytes = read_file(path);
  const std::string where = " in " + path.string();
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 7) != 0) {
    throw ParseError("not a checkpoint file (bad magic)" + where);
  }
  if (bytes[7] != kCheckpointMagic[7]) throw VersionError("unsupported checkpoint container version" + where);
  const std::uint64_t header_len = get_u64_le(bytes, 8);
  if (header_len > bytes.size() - 16) throw ParseError("truncated checkpoint header" + where);
  const json header = parse_json_text(bytes.substr(16, header_len), path.string());

  Checkpoint ckpt;
  try {
    ckpt.format_version = header.at("format_version").get<int>();
    if (ckpt.format_version != kCheckpointVersion) {
      throw VersionError("checkpoint format_version " + std::to_string(ckpt.format_version) +
                         " is not supported (expected " + std::to_string(kCheckpointVersion) + ")" + where);
    }
    ckpt.component = component_from_string(header.at("component").get<std::string>());
    ckpt.seed = header.at("seed").get<std::uint64_t>();
    ckpt.epoch = header.at("epoch").get<int>();
    ckpt.step = header.at("step").get<std::int64_t>();
    ckpt.config = header.at("config");
    ckpt.optimizer_steps = header.at("optimizer").at("step_count").get<std::int64_t>();
    if (!header.at("blobs").is_array()) throw ParseError("checkpoint header 'blobs' is not an array" + where);
  } catch (const json::exception& e) {
    throw ParseError("malformed checkpoint header" + where + ": " + e.what());
  }

  const std::size_t data_start = 16 + header_len;
  for (const auto& entry : header.at("blobs")) {
    NamedArray a;
    std::string section;
    std::uint64_t offset = 0, nbytes = 0;
    try {
      a.name = entry.at("name").get<std::string>();
      section = entry.at("section").get<std::string>();
      a.shape = entry.at("shape").get<Shape>();
      offset = entry.at("offset").get<std::uint64_t>();
      nbytes = entry.at("nbytes").get<std::uint64_t>();
    } catch (const json::exception& e) {
      throw ParseError("malformed blob entry" + where + ": " + e.what());
    }
    if (nbytes != shape_numel(a.shape) * 4) {
      throw CorruptionError("blob '" + a.name + "' declares " + std::to_string(nbytes) + " bytes for shape " +
                            shape_str(a.shape) + where);
    }
    if (data_start + offset + nbytes > bytes.size()) {
      throw ParseError("truncated checkpoint: blob '" + a.name + "' is missing" + where);
    }
    a.data.resize(nbytes / 4);
    std::memcpy(a.data.data(), bytes.data() + data_start + offset, nbytes);
    if (section == "params") {
      ckpt.params.push_back(std::move(a));
    } else if (section == "optimizer") {
      ckpt.optimizer.push_back(std::move(a));
    } else {
      throw ParseError("unknown blob section '" + section + "'" + where);
    }
  }
  return ckpt;
}

Checkpoint load_checkpoint(const fs::path& path, Component expected) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.component != expected) {
    throw ValidationError("component mismatch: " + path.string() + " holds a " + to_string(ckpt.component) +
                          " checkpoint, expected " + to_string(expected));
  }
  return ckpt;
}

Checkpoint capture_checkpoint(Component component, const nn::ParameterStore& store, const Adam* optimizer,
                              std::uint64_t seed, int epoch, std::int64_t step, json config) {
  Checkpoint ckpt;
  ckpt.component = component;
  ckpt.seed = seed;
  ckpt.epoch = epoch;
  ckpt.step = step;
  ckpt.config = std::move(config);
  for (const nn::Parameter* p : store.all()) {
    ckpt.params.push_back(NamedArray{p->name(), p->shape(), {p->values().begin(), p->values().end()}});
  }
  if (optimizer) {
    ckpt.optimizer_steps = optimizer->step_count();
    const auto& params = optimizer->params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      ckpt.optimizer.push_back(NamedArray{params[i]->name() + ".m", params[i]->shape(), optimizer->first_moment(i)});
      ckpt.optimizer.push_back(NamedArray{params[i]->name() + ".v", params[i]->shape(), optimizer->second_moment(i)});
    }
  }
  return ckpt;
}

void restore_checkpoint(const Checkpoint& ckpt, nn::ParameterStore& store, Adam* optimizer) {
  auto index = [](const std::vector<NamedArray>& arrays) {
    std::map<std::string, const NamedArray*> m;
    for (const auto& a : arrays) m[a.name] = &a;
    return m;
  };
  const auto params = index(ckpt.params);
  auto fetch = [](const std::map<std::string, const NamedArray*>& m, const std::string& name, const Shape& shape,
                  const char* what) -> const NamedArray& {
    const auto it = m.find(name);
    if (it == m.end()) throw CorruptionError(std::string("checkpoint lacks ") + what + " '" + name + "'");
    if (it->second->shape != shape) {
      throw CorruptionError(std::string(what) + " '" + name + "' has shape " + shape_str(it->second->shape) +
                            ", expected " + shape_str(shape));
    }
    return *it->second;
  };
  for (nn::Parameter* p : store.all()) p->assign(fetch(params, p->name(), p->shape(), "parameter").data);
  if (params.size() != store.all().size()) {
    throw CorruptionError("checkpoint holds " + std::to_string(params.size()) + " arrays, network has " +
                          std::to_string(store.all().size()));
  }
  if (optimizer) {
    if (ckpt.optimizer.empty()) throw CorruptionError("checkpoint carries no optimizer state");
    const auto moments = index(ckpt.optimizer);
    const auto& ps = optimizer->params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      optimizer->first_moment(i) = fetch(moments, ps[i]->name() + ".m", ps[i]->shape(), "moment").data;
      optimizer->second_moment(i) = fetch(moments, ps[i]->name() + ".v", ps[i]->shape(), "moment").data;
    }
    optimizer->set_step_count(ckpt.optimizer_steps);
  }
}

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string sha256_hex(const std::string& text) { return sha256_hex(text.data(), text.size()); }

std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

std::string config_hash(const json& config) { return sha256_hex(config.dump()); }

std::map<std::string, std::string> dataset_fingerprint(const fs::path& root) {
  if (!fs::is_directory(root)) throw NotFoundError("directory not found: " + root.string());
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file()) out[fs::relative(entry.path(), root).generic_string()] = sha256_file(entry.path());
  }
  return out;
}

json to_json(const RunRecord& r) {
  return json{{"run_id", r.run_id},
              {"command", r.command},
              {"started", r.started},
              {"finished", r.finished},
              {"config", r.config},
              {"config_hash", r.config_hash},
              {"dataset_fingerprint", r.dataset_fingerprint},
              {"metrics", r.metrics},
              {"checkpoints", r.checkpoints}};
}

RunRecord run_record_from_json(const json& j) {
  try {
    RunRecord r;
    r.run_id = j.at("run_id").get<std::string>();
    r.command = j.value("command", "");
    r.started = j.at("started").get<std::string>();
    r.finished = j.at("finished").get<std::string>();
    r.config = j.at("config");
    r.config_hash = j.at("config_hash").get<std::string>();
    r.dataset_fingerprint = j.value("dataset_fingerprint", std::map<std::string, std::string>{});
    r.metrics = j.value("metrics", json::object());
    r.checkpoints = j.value("checkpoints", std::vector<std::string>{});
    return r;
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed run record: ") + e.what());
  }
}

RunManifest::RunManifest(fs::path path) : path_(std::move(path)) {
  if (!fs::exists(path_)) return;
  const json doc = read_json_file(path_);
  if (!doc.is_object() || !doc.contains("runs") || !doc["runs"].is_array()) {
    throw ParseError("run manifest " + path_.string() + " lacks a 'runs' array");
  }
  for (const auto& r : doc["runs"]) {
    raw_.push_back(r);
    runs_.push_back(run_record_from_json(r));
  }
}

void RunManifest::append(const RunRecord& record) {
  raw_.push_back(to_json(record));
  runs_.push_back(record);
  write_file_atomic(path_, json{{"runs", raw_}}.dump(2) + "\n");
}

void verify_run_record(const RunRecord& r) {
  if (config_hash(r.config) != r.config_hash) {
    throw CorruptionError("run " + r.run_id + ": config hash does not match the stored config");
  }
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  fs::path tmp = path;
  tmp += ".tmp" + std::to_string(std::random_device{}());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move file into place at " + path.string());
  }
}

std::string read_file(const fs::path& path) {
  if (!fs::exists(path)) throw NotFoundError("file not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(origin + ": JSON syntax error at byte " + std::to_string(e.byte) + ": " + e.what());
  }
}

json read_json_file(const fs::path& path) { return parse_json_text(read_file(path), path.string()); }

}  // namespace npx
