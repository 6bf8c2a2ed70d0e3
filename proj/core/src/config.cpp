#include "karma/config.hpp"

#include <fstream>
#include <set>

#include "json.hpp"

namespace karma::config {

using nlohmann::json;

namespace {

json parse_text(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
}

json read_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_text(text);
}

void apply_override(json& doc, const std::string& spec) {
    auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override must look like key.path=value: '" + spec + "'");
    std::string key = spec.substr(0, eq);
    std::string value = spec.substr(eq + 1);
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::parse_error&) {
        parsed = value;  // bare strings stay strings
    }
    std::string pointer = "/";
    for (char c : key) pointer += (c == '.') ? '/' : c;
    doc[json::json_pointer(pointer)] = parsed;
}

void apply_overrides(json& doc, const std::vector<std::string>& overrides) {
    for (const auto& o : overrides) apply_override(doc, o);
}

// Strict object reader: every key must be consumed.
class ObjectReader {
  public:
    ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object())
            throw ConfigError("config: '" + (path_.empty() ? "<root>" : path_) +
                              "' must be a JSON object");
    }

    ~ObjectReader() = default;

    template <class T>
    void get(const char* key, T& out) {
        auto it = j_.find(key);
        if (it == j_.end()) return;
        seen_.insert(key);
        try {
            out = it->get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config: bad value type at '" + dotted(key) + "'");
        }
    }

    bool has_object(const char* key) {
        auto it = j_.find(key);
        if (it == j_.end()) return false;
        seen_.insert(key);
        return true;
    }

    const json& object(const char* key) { return j_.at(key); }

    std::string dotted(const char* key) const {
        return path_.empty() ? key : path_ + "." + key;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw ConfigError("unknown config key: " + dotted(it.key().c_str()));
    }

  private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

train::TrainConfig parse_train(const json& doc) {
    train::TrainConfig cfg;
    ObjectReader root(doc, "");
    root.get("base_lr", cfg.base_lr);
    root.get("weight_decay", cfg.weight_decay);
    if (root.has_object("betas")) {
        const json& betas = root.object("betas");
        if (!betas.is_array() || betas.size() != 2)
            throw ConfigError("config: 'betas' must be a two-element array");
        cfg.beta1 = betas[0].get<double>();
        cfg.beta2 = betas[1].get<double>();
    }
    root.get("adam_eps", cfg.adam_eps);
    root.get("epochs", cfg.epochs);
    root.get("batch_size", cfg.batch_size);
    root.get("warmup_epochs", cfg.warmup_epochs);
    root.get("seed", cfg.seed);
    root.get("clip_norm", cfg.clip_norm);
    root.get("checkpoint_every", cfg.checkpoint_every);

    if (root.has_object("scope")) {
        ObjectReader scope(root.object("scope"), "scope");
        scope.get("pixel_masked_only", cfg.scope.pixel_masked_only);
        scope.get("phys_all_tokens", cfg.scope.phys_all_tokens);
        scope.finish();
    }
    if (root.has_object("loss")) {
        ObjectReader loss(root.object("loss"), "loss");
        loss.get("lambda1", cfg.loss.lambda1);
        loss.get("lambda2", cfg.loss.lambda2);
        loss.get("lambda3", cfg.loss.lambda3);
        loss.get("delta", cfg.loss.delta);
        loss.get("epsilon", cfg.loss.epsilon);
        loss.get("elementwise_huber", cfg.loss.elementwise_huber);
        loss.finish();
    }
    if (root.has_object("model")) {
        ObjectReader m(root.object("model"), "model");
        m.get("image_size", cfg.model.image_size);
        m.get("patch_size", cfg.model.patch_size);
        m.get("bands", cfg.model.bands);
        m.get("embed_dim", cfg.model.embed_dim);
        m.get("decoder_dim", cfg.model.decoder_dim);
        m.get("heads", cfg.model.heads);
        m.get("encoder_depth", cfg.model.encoder_depth);
        m.get("decoder_depth", cfg.model.decoder_depth);
        m.get("mask_ratio", cfg.model.mask_ratio);
        m.get("endmember_count", cfg.model.endmember_count);
        m.get("mlp_ratio", cfg.model.mlp_ratio);
        m.finish();
    }
    if (root.has_object("data")) {
        ObjectReader d(root.object("data"), "data");
        d.get("train_dir", cfg.train_dir);
        d.get("val_dir", cfg.val_dir);
        d.get("val_fraction", cfg.val_fraction);
        d.finish();
    }
    if (root.has_object("downstream")) {
        ObjectReader d(root.object("downstream"), "downstream");
        d.get("num_classes", cfg.downstream.num_classes);
        d.get("epochs", cfg.downstream.epochs);
        d.get("lr", cfg.downstream.lr);
        d.get("weight_decay", cfg.downstream.weight_decay);
        d.get("val_fraction", cfg.downstream.val_fraction);
        d.finish();
    }
    root.finish();
    return cfg;
}

synth::GenParams parse_gen(const json& doc) {
    synth::GenParams p;
    ObjectReader root(doc, "");
    root.get("tiles", p.tiles);
    root.get("height", p.height);
    root.get("width", p.width);
    root.get("bands", p.bands);
    root.get("endmembers", p.endmembers);
    root.get("concentration", p.concentration);
    root.get("noise_sigma", p.noise_sigma);
    root.get("min_separation", p.min_separation);
    root.get("seed", p.seed);
    root.finish();
    return p;
}

}  // namespace

train::TrainConfig load_train_config(const std::filesystem::path& path,
                                     const std::vector<std::string>& overrides) {
    json doc = read_file(path);
    apply_overrides(doc, overrides);
    return parse_train(doc);
}

synth::GenParams load_gen_config(const std::filesystem::path& path,
                                 const std::vector<std::string>& overrides) {
    json doc = read_file(path);
    apply_overrides(doc, overrides);
    return parse_gen(doc);
}

train::TrainConfig train_config_from_json_text(const std::string& text,
                                               const std::vector<std::string>& overrides) {
    json doc = parse_text(text);
    apply_overrides(doc, overrides);
    return parse_train(doc);
}

synth::GenParams gen_config_from_json_text(const std::string& text,
                                           const std::vector<std::string>& overrides) {
    json doc = parse_text(text);
    apply_overrides(doc, overrides);
    return parse_gen(doc);
}

std::string to_json_text(const train::TrainConfig& cfg) {
    json j{{"base_lr", cfg.base_lr},
           {"weight_decay", cfg.weight_decay},
           {"betas", json::array({cfg.beta1, cfg.beta2})},
           {"adam_eps", cfg.adam_eps},
           {"epochs", cfg.epochs},
           {"batch_size", cfg.batch_size},
           {"warmup_epochs", cfg.warmup_epochs},
           {"seed", cfg.seed},
           {"clip_norm", cfg.clip_norm},
           {"checkpoint_every", cfg.checkpoint_every},
           {"scope",
            json{{"pixel_masked_only", cfg.scope.pixel_masked_only},
                 {"phys_all_tokens", cfg.scope.phys_all_tokens}}},
           {"loss",
            json{{"lambda1", cfg.loss.lambda1},
                 {"lambda2", cfg.loss.lambda2},
                 {"lambda3", cfg.loss.lambda3},
                 {"delta", cfg.loss.delta},
                 {"epsilon", cfg.loss.epsilon},
                 {"elementwise_huber", cfg.loss.elementwise_huber}}},
           {"model",
            json{{"image_size", cfg.model.image_size},
                 {"patch_size", cfg.model.patch_size},
                 {"bands", cfg.model.bands},
                 {"embed_dim", cfg.model.embed_dim},
                 {"decoder_dim", cfg.model.decoder_dim},
                 {"heads", cfg.model.heads},
                 {"encoder_depth", cfg.model.encoder_depth},
                 {"decoder_depth", cfg.model.decoder_depth},
                 {"mask_ratio", cfg.model.mask_ratio},
                 {"endmember_count", cfg.model.endmember_count},
                 {"mlp_ratio", cfg.model.mlp_ratio}}},
           {"data",
            json{{"train_dir", cfg.train_dir},
                 {"val_dir", cfg.val_dir},
                 {"val_fraction", cfg.val_fraction}}},
           {"downstream",
            json{{"num_classes", cfg.downstream.num_classes},
                 {"epochs", cfg.downstream.epochs},
                 {"lr", cfg.downstream.lr},
                 {"weight_decay", cfg.downstream.weight_decay},
                 {"val_fraction", cfg.downstream.val_fraction}}}};
    return j.dump(2) + "\n";
}

std::string to_json_text(const synth::GenParams& p) {
    json j{{"tiles", p.tiles},
           {"height", p.height},
           {"width", p.width},
           {"bands", p.bands},
           {"endmembers", p.endmembers},
           {"concentration", p.concentration},
           {"noise_sigma", p.noise_sigma},
           {"min_separation", p.min_separation},
           {"seed", p.seed}};
    return j.dump(2) + "\n";
}

}  // namespace karma::config
