#include "npx/config.hpp"

#include <set>
#include <string>
#include <vector>

#include "npx/artifacts.hpp"
#include "npx/errors.hpp"

using nlohmann::json;

namespace npx {

namespace {

// Reads typed fields out of one JSON object and collects every problem so the
// caller sees all offending keys at once.
class FieldReader {
 public:
  FieldReader(const json& j, std::string what) : j_(j), what_(std::move(what)) {
    if (!j_.is_object()) throw ValidationError(what_ + " must be a JSON object");
  }

  template <typename T, typename Check>
  void read(const std::string& key, T& out, Check ok, const char* expected) {
    known_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    if (!ok(v)) {
      bad_.push_back("'" + key + "' (expected " + expected + ", got " + v.dump() + ")");
      return;
    }
    out = v.get<T>();
  }

  void integer(const std::string& key, int& out) {
    read(key, out, [](const json& v) { return v.is_number_integer(); }, "integer");
  }
  void seed(const std::string& key, std::uint64_t& out) {
    read(key, out, [](const json& v) { return v.is_number_unsigned(); }, "non-negative integer");
  }
  void real(const std::string& key, double& out) {
    read(key, out, [](const json& v) { return v.is_number(); }, "number");
  }
  void boolean(const std::string& key, bool& out) {
    read(key, out, [](const json& v) { return v.is_boolean(); }, "boolean");
  }
  void string(const std::string& key, std::string& out) {
    read(key, out, [](const json& v) { return v.is_string(); }, "string");
  }
  void betas(const std::string& key, double& b1, double& b2) {
    std::vector<double> pair{b1, b2};
    read(key, pair,
         [](const json& v) { return v.is_array() && v.size() == 2 && v[0].is_number() && v[1].is_number(); },
         "[beta1, beta2]");
    b1 = pair[0];
    b2 = pair[1];
  }

  const json* object(const std::string& key) {
    known_.insert(key);
    if (!j_.contains(key)) return nullptr;
    if (!j_.at(key).is_object()) {
      bad_.push_back("'" + key + "' (expected object)");
      return nullptr;
    }
    return &j_.at(key);
  }

  /// Throws when any unknown key or type problem was seen.
  void finish() {
    for (const auto& [key, _] : j_.items()) {
      if (!known_.count(key)) bad_.push_back("unknown key '" + key + "'");
    }
    if (bad_.empty()) return;
    std::string msg = what_ + " has invalid keys:";
    for (const auto& b : bad_) msg += " " + b + ";";
    msg.pop_back();
    throw ValidationError(msg);
  }

 private:
  const json& j_;
  std::string what_;
  std::set<std::string> known_;
  std::vector<std::string> bad_;
};

}  // namespace

GanRunConfig parse_gan_config(const json& j) {
  GanRunConfig c;
  FieldReader r(j, "GAN config");
  r.integer("batch_size", c.batch_size);
  r.real("lr", c.lr);
  r.betas("betas", c.beta1, c.beta2);
  r.integer("epochs", c.epochs);
  r.integer("image_size", c.image_size);
  r.integer("depth", c.depth);
  std::string mode = to_string(c.adversarial_mode);
  r.string("adversarial_mode", mode);
  if (const json* w = r.object("weights")) {
    FieldReader wr(*w, "GAN config weights");
    wr.real("w_D_real", c.weights.w_D_real);
    wr.real("w_D_gen", c.weights.w_D_gen);
    wr.real("w_G_real", c.weights.w_G_real);
    wr.real("w_G_gen", c.weights.w_G_gen);
    wr.finish();
  }
  r.seed("seed", c.seed);
  r.integer("checkpoint_every", c.checkpoint_every);
  r.integer("base_channels", c.base_channels);
  r.real("dropout_rate", c.dropout_rate);
  r.integer("disc_layers", c.disc_layers);
  r.integer("disc_base_channels", c.disc_base_channels);
  r.finish();
  c.adversarial_mode = adversarial_mode_from_string(mode);
  c.validate();
  return c;
}

GanRunConfig parse_gan_config_file(const std::filesystem::path& path) { return parse_gan_config(read_json_file(path)); }

SiameseRunConfig parse_siamese_config(const json& j) {
  SiameseRunConfig c;
  FieldReader r(j, "Siamese config");
  std::string backbone = to_string(c.model.backbone);
  std::string distance = to_string(c.model.distance);
  r.string("backbone", backbone);
  r.integer("embedding_dim", c.model.embedding_dim);
  r.real("margin", c.model.margin);
  r.string("distance", distance);
  r.boolean("pretrained", c.model.pretrained);
  r.integer("image_size", c.model.image_size);
  r.integer("channels", c.model.channels);
  r.integer("pairs_per_epoch", c.pairs_per_epoch);
  r.integer("val_pairs", c.val_pairs);
  r.integer("batch", c.batch);
  r.real("lr", c.lr);
  r.betas("betas", c.beta1, c.beta2);
  r.integer("epochs", c.epochs);
  r.seed("seed", c.seed);
  r.real("p_similar", c.p_similar);
  std::string init;
  r.string("init_checkpoint", init);
  r.finish();
  c.model.backbone = backbone_from_string(backbone);
  c.model.distance = distance_from_string(distance);
  if (!init.empty()) c.init_checkpoint = init;
  c.validate();
  return c;
}

SiameseRunConfig parse_siamese_config_file(const std::filesystem::path& path) {
  return parse_siamese_config(read_json_file(path));
}

}  // namespace npx
