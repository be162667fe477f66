#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "npx/nn.hpp"
#include "npx/optim.hpp"

namespace npx {

inline constexpr int kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'N', 'P', 'X', 'C', 'K', 'P', 'T', '1'};
inline constexpr const char* kCheckpointExtension = ".npxckpt";

enum class Component { generator, discriminator, siamese };

std::string to_string(Component c);
Component component_from_string(const std::string& s);

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

/// In-memory form of a .npxckpt file.
struct Checkpoint {
  int format_version = kCheckpointVersion;
  Component component = Component::generator;
  std::uint64_t seed = 0;
  int epoch = 0;
  std::int64_t step = 0;
  nlohmann::json config = nlohmann::json::object();
  std::vector<NamedArray> params;
  std::int64_t optimizer_steps = 0;
  std::vector<NamedArray> optimizer;  // "<param>.m" / "<param>.v", empty when no optimizer was saved
};

/// Layout: 8-byte magic, uint64 LE header length, JSON header, raw LE float32
/// blobs. Written to a temp file and renamed into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Same, rejecting a file written for another component.
Checkpoint load_checkpoint(const std::filesystem::path& path, Component expected);

/// Snapshot of every parameter and buffer in `store`, plus optimizer moments.
Checkpoint capture_checkpoint(Component component, const nn::ParameterStore& store, const Adam* optimizer,
                              std::uint64_t seed, int epoch, std::int64_t step, nlohmann::json config);

/// Copies values back; every store entry must be present with its shape.
void restore_checkpoint(const Checkpoint& ckpt, nn::ParameterStore& store, Adam* optimizer);

// -- hashing and manifests ----------------------------------------------------

std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_hex(const std::string& text);
std::string sha256_file(const std::filesystem::path& path);

/// Hash of the canonical (sorted-key, compact) JSON dump.
std::string config_hash(const nlohmann::json& config);

/// Relative path -> content hash for every regular file under root.
std::map<std::string, std::string> dataset_fingerprint(const std::filesystem::path& root);

struct RunRecord {
  std::string run_id;
  std::string command;
  std::string started;
  std::string finished;
  nlohmann::json config = nlohmann::json::object();
  std::string config_hash;
  std::map<std::string, std::string> dataset_fingerprint;
  nlohmann::json metrics = nlohmann::json::object();
  std::vector<std::string> checkpoints;
};

nlohmann::json to_json(const RunRecord& r);
RunRecord run_record_from_json(const nlohmann::json& j);

/// run.json: {"runs": [...]}, extended by append only.
class RunManifest {
 public:
  explicit RunManifest(std::filesystem::path path);

  const std::vector<RunRecord>& runs() const { return runs_; }
  /// Adds a record and rewrites the file atomically. Earlier records are kept verbatim.
  void append(const RunRecord& record);

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::vector<nlohmann::json> raw_;
  std::vector<RunRecord> runs_;
};

/// Throws CorruptionError if the stored hash does not match the stored config.
void verify_run_record(const RunRecord& r);

std::string utc_timestamp();

/// Writes text to path through a temp file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

std::string read_file(const std::filesystem::path& path);

/// Parses JSON text, mapping syntax errors to ParseError with the byte offset.
nlohmann::json parse_json_text(const std::string& text, const std::string& origin);
nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace npx
