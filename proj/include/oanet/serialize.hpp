#pragma once

// Model persistence. Every artifact is a versioned JSON document:
//
//   {"format_version":1, "kind":"...", "digest":"<fnv1a64 of payload>",
//    "payload":{...}}
//
// Writing goes through JsonWriter (deterministic key order, %.17g floats),
// so save -> load -> save is byte-stable. Loading re-serializes the decoded
// payload and compares digests, which catches any edit to the payload text.
// Parsing itself is delegated to the vendored nlohmann header.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "oanet/common.hpp"
#include "oanet/encoder.hpp"
#include "oanet/fusion.hpp"
#include "oanet/gate.hpp"
#include "oanet/tabular.hpp"

namespace oanet {

inline constexpr int kFormatVersion = 1;

// ---------------------------------------------------------------------------
// Emission.

class JsonWriter {
public:
    void begin_object() {
        sep();
        out_ += '{';
        first_.push_back(true);
    }
    void end_object() {
        out_ += '}';
        first_.pop_back();
    }
    void begin_array() {
        sep();
        out_ += '[';
        first_.push_back(true);
    }
    void end_array() {
        out_ += ']';
        first_.pop_back();
    }
    void key(std::string_view k) {
        sep();
        quote(k);
        out_ += ':';
        first_.back() = true;  // the upcoming value is not comma-separated
    }
    void value(double v) {
        sep();
        if (v == 0.0) v = 0.0;  // "-0" would parse back as +0 and break byte-stability
        out_ += g17(v);
    }
    void value(int v) { value_integral(static_cast<long long>(v)); }
    void value(long v) { value_integral(static_cast<long long>(v)); }
    void value(uint64_t v) {
        sep();
        out_ += strfmt("%llu", static_cast<unsigned long long>(v));
    }
    void value(bool v) {
        sep();
        out_ += v ? "true" : "false";
    }
    void value(std::string_view s) {
        sep();
        quote(s);
    }
    void value(const char* s) { value(std::string_view(s)); }
    // Splices an already-serialized JSON value.
    void raw(std::string_view json) {
        sep();
        out_ += json;
    }
    void numbers(const std::vector<double>& v) {
        begin_array();
        for (double x : v) value(x);
        end_array();
    }
    const std::string& str() const { return out_; }

private:
    void sep() {
        if (first_.empty()) return;
        if (!first_.back()) out_ += ',';
        first_.back() = false;
    }
    void value_integral(long long v) {
        sep();
        out_ += strfmt("%lld", v);
    }
    void quote(std::string_view s) {
        out_ += '"';
        for (unsigned char c : s) {
            switch (c) {
                case '"': out_ += "\\\""; break;
                case '\\': out_ += "\\\\"; break;
                case '\b': out_ += "\\b"; break;
                case '\f': out_ += "\\f"; break;
                case '\n': out_ += "\\n"; break;
                case '\r': out_ += "\\r"; break;
                case '\t': out_ += "\\t"; break;
                default:
                    if (c < 0x20)
                        out_ += strfmt("\\u%04x", c);
                    else
                        out_ += static_cast<char>(c);
            }
        }
        out_ += '"';
    }

    std::string out_;
    std::vector<bool> first_;
};

// ---------------------------------------------------------------------------
// Files.

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    out << text;
}

// ---------------------------------------------------------------------------
// Document envelope.

inline std::string wrap_document(std::string_view kind, const std::string& payload) {
    JsonWriter w;
    w.begin_object();
    w.key("format_version");
    w.value(kFormatVersion);
    w.key("kind");
    w.value(kind);
    w.key("digest");
    w.value(hex64(fnv1a64(payload)));
    w.key("payload");
    w.raw(payload);
    w.end_object();
    return w.str();
}

inline nlohmann::json parse_document(const std::string& text, const std::string& kind) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(kind + ": unreadable document (truncated or not JSON): " + e.what());
    }
    if (!j.is_object() || !j.contains("format_version"))
        throw LoadError(kind + ": missing format_version");
    if (!j["format_version"].is_number_integer() ||
        j["format_version"].get<long long>() != kFormatVersion)
        throw LoadError(strfmt("%s: unsupported format_version %s (this build reads version %d)",
                               kind.c_str(), j["format_version"].dump().c_str(), kFormatVersion));
    if (!j.contains("kind") || !j["kind"].is_string() || j["kind"].get<std::string>() != kind)
        throw LoadError(kind + ": document kind mismatch");
    if (!j.contains("digest") || !j.contains("payload"))
        throw LoadError(kind + ": missing digest or payload");
    return j;
}

inline void check_digest(const std::string& kind, const nlohmann::json& doc,
                         const std::string& canonical_payload) {
    std::string want = hex64(fnv1a64(canonical_payload));
    if (!doc["digest"].is_string() || doc["digest"].get<std::string>() != want)
        throw LoadError(kind + ": integrity digest mismatch");
}

namespace detail {

template <typename T>
T field(const nlohmann::json& j, const char* key, const char* artifact) {
    if (!j.is_object() || !j.contains(key))
        throw LoadError(strfmt("%s: missing field '%s'", artifact, key));
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw LoadError(strfmt("%s: field '%s' has the wrong type", artifact, key));
    }
}

inline const nlohmann::json& child(const nlohmann::json& j, const char* key,
                                   const char* artifact) {
    if (!j.is_object() || !j.contains(key))
        throw LoadError(strfmt("%s: missing field '%s'", artifact, key));
    return j.at(key);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Trees. Nodes are positional arrays [feature, threshold, default_left,
// left, right, value] to keep forest files compact.

namespace detail {

inline void write_tree(JsonWriter& w, const Tree& t) {
    w.begin_object();
    w.key("nodes");
    w.begin_array();
    for (const TreeNode& n : t.nodes) {
        w.begin_array();
        w.value(n.feature);
        w.value(n.threshold);
        w.value(n.default_left);
        w.value(n.left);
        w.value(n.right);
        w.value(n.value);
        w.end_array();
    }
    w.end_array();
    w.end_object();
}

inline Tree read_tree(const nlohmann::json& j, const char* artifact) {
    Tree t;
    const nlohmann::json& nodes = child(j, "nodes", artifact);
    if (!nodes.is_array()) throw LoadError(strfmt("%s: nodes must be an array", artifact));
    for (const auto& nj : nodes) {
        if (!nj.is_array() || nj.size() != 6)
            throw LoadError(strfmt("%s: node must have 6 entries", artifact));
        TreeNode n;
        try {
            n.feature = nj[0].get<int>();
            n.threshold = nj[1].get<double>();
            n.default_left = nj[2].get<bool>();
            n.left = nj[3].get<int>();
            n.right = nj[4].get<int>();
            n.value = nj[5].get<double>();
        } catch (const nlohmann::json::exception&) {
            throw LoadError(strfmt("%s: malformed tree node", artifact));
        }
        t.nodes.push_back(n);
    }
    return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Standardizer.

inline std::string payload_standardizer(const StandardizerStats& s) {
    JsonWriter w;
    w.begin_object();
    w.key("mean");
    w.numbers(s.mean);
    w.key("stdev");
    w.numbers(s.stdev);
    w.end_object();
    return w.str();
}

inline std::string save_standardizer(const StandardizerStats& s) {
    return wrap_document("standardizer", payload_standardizer(s));
}

inline StandardizerStats load_standardizer(const std::string& text) {
    nlohmann::json doc = parse_document(text, "standardizer");
    const nlohmann::json& p = doc["payload"];
    StandardizerStats s;
    s.mean = detail::field<std::vector<double>>(p, "mean", "standardizer");
    s.stdev = detail::field<std::vector<double>>(p, "stdev", "standardizer");
    if (s.mean.size() != s.stdev.size())
        throw LoadError("standardizer: mean/stdev length mismatch");
    check_digest("standardizer", doc, payload_standardizer(s));
    return s;
}

// ---------------------------------------------------------------------------
// Boosted ensemble.

inline std::string payload_boosted(const TreeEnsembleModel& m) {
    JsonWriter w;
    w.begin_object();
    w.key("config");
    w.begin_object();
    w.key("rounds");
    w.value(m.config.rounds);
    w.key("depth");
    w.value(m.config.depth);
    w.key("shrinkage");
    w.value(m.config.shrinkage);
    w.key("reg_lambda");
    w.value(m.config.reg_lambda);
    w.key("row_subsample");
    w.value(m.config.row_subsample);
    w.key("p_mask");
    w.value(m.config.p_mask);
    w.key("seed");
    w.value(m.config.seed);
    w.end_object();
    w.key("n_features");
    w.value(m.n_features);
    w.key("init_score");
    w.value(m.init_score);
    w.key("train_log_loss");
    w.numbers(m.train_log_loss);
    w.key("trees");
    w.begin_array();
    for (const Tree& t : m.trees) detail::write_tree(w, t);
    w.end_array();
    w.end_object();
    return w.str();
}

inline std::string save_boosted(const TreeEnsembleModel& m) {
    return wrap_document("boosted_trees", payload_boosted(m));
}

namespace detail {

inline TreeEnsembleModel boosted_from_payload(const nlohmann::json& p) {
    TreeEnsembleModel m;
    const nlohmann::json& c = child(p, "config", "boosted_trees");
    m.config.rounds = field<int>(c, "rounds", "boosted_trees");
    m.config.depth = field<int>(c, "depth", "boosted_trees");
    m.config.shrinkage = field<double>(c, "shrinkage", "boosted_trees");
    m.config.reg_lambda = field<double>(c, "reg_lambda", "boosted_trees");
    m.config.row_subsample = field<double>(c, "row_subsample", "boosted_trees");
    m.config.p_mask = field<double>(c, "p_mask", "boosted_trees");
    m.config.seed = field<uint64_t>(c, "seed", "boosted_trees");
    m.n_features = field<int>(p, "n_features", "boosted_trees");
    m.init_score = field<double>(p, "init_score", "boosted_trees");
    m.train_log_loss = field<std::vector<double>>(p, "train_log_loss", "boosted_trees");
    const nlohmann::json& trees = child(p, "trees", "boosted_trees");
    for (const auto& tj : trees) m.trees.push_back(read_tree(tj, "boosted_trees"));
    return m;
}

}  // namespace detail

inline TreeEnsembleModel load_boosted(const std::string& text) {
    nlohmann::json doc = parse_document(text, "boosted_trees");
    TreeEnsembleModel m = detail::boosted_from_payload(doc["payload"]);
    check_digest("boosted_trees", doc, payload_boosted(m));
    return m;
}

// ---------------------------------------------------------------------------
// Random forest.

inline std::string payload_forest(const ForestModel& m) {
    JsonWriter w;
    w.begin_object();
    w.key("config");
    w.begin_object();
    w.key("trees");
    w.value(m.config.trees);
    w.key("depth");
    w.value(m.config.depth);
    w.key("bootstrap");
    w.value(m.config.bootstrap);
    w.key("feature_subsample");
    w.value(m.config.feature_subsample);
    w.key("p_mask");
    w.value(m.config.p_mask);
    w.key("seed");
    w.value(m.config.seed);
    w.end_object();
    w.key("n_features");
    w.value(m.n_features);
    w.key("oob_accuracy");
    w.value(m.oob_accuracy);
    w.key("trees");
    w.begin_array();
    for (const Tree& t : m.trees) detail::write_tree(w, t);
    w.end_array();
    w.end_object();
    return w.str();
}

inline std::string save_forest(const ForestModel& m) {
    return wrap_document("random_forest", payload_forest(m));
}

namespace detail {

inline ForestModel forest_from_payload(const nlohmann::json& p) {
    ForestModel m;
    const nlohmann::json& c = child(p, "config", "random_forest");
    m.config.trees = field<int>(c, "trees", "random_forest");
    m.config.depth = field<int>(c, "depth", "random_forest");
    m.config.bootstrap = field<bool>(c, "bootstrap", "random_forest");
    m.config.feature_subsample = field<bool>(c, "feature_subsample", "random_forest");
    m.config.p_mask = field<double>(c, "p_mask", "random_forest");
    m.config.seed = field<uint64_t>(c, "seed", "random_forest");
    m.n_features = field<int>(p, "n_features", "random_forest");
    m.oob_accuracy = field<double>(p, "oob_accuracy", "random_forest");
    const nlohmann::json& trees = child(p, "trees", "random_forest");
    for (const auto& tj : trees) m.trees.push_back(read_tree(tj, "random_forest"));
    return m;
}

}  // namespace detail

inline ForestModel load_forest(const std::string& text) {
    nlohmann::json doc = parse_document(text, "random_forest");
    ForestModel m = detail::forest_from_payload(doc["payload"]);
    check_digest("random_forest", doc, payload_forest(m));
    return m;
}

// ---------------------------------------------------------------------------
// Intra-bag.

inline std::string payload_bag(const BagModel& m) {
    JsonWriter w;
    w.begin_object();
    w.key("config");
    w.begin_object();
    w.key("p_mask");
    w.value(m.config.p_mask);
    w.key("seed");
    w.value(m.config.seed);
    w.end_object();
    w.key("members");
    w.begin_array();
    for (const BagMember& mem : m.members) {
        w.begin_object();
        w.key("name");
        w.value(mem.name);
        w.key("is_forest");
        w.value(mem.is_forest);
        w.key("model");
        if (mem.is_forest)
            w.raw(payload_forest(mem.forest));
        else
            w.raw(payload_boosted(mem.boosted));
        w.end_object();
    }
    w.end_array();
    w.end_object();
    return w.str();
}

inline std::string save_bag(const BagModel& m) { return wrap_document("bag", payload_bag(m)); }

inline BagModel load_bag(const std::string& text) {
    nlohmann::json doc = parse_document(text, "bag");
    const nlohmann::json& p = doc["payload"];
    BagModel m;
    const nlohmann::json& c = detail::child(p, "config", "bag");
    m.config.p_mask = detail::field<double>(c, "p_mask", "bag");
    m.config.seed = detail::field<uint64_t>(c, "seed", "bag");
    const nlohmann::json& members = detail::child(p, "members", "bag");
    for (const auto& mj : members) {
        BagMember mem;
        mem.name = detail::field<std::string>(mj, "name", "bag");
        mem.is_forest = detail::field<bool>(mj, "is_forest", "bag");
        const nlohmann::json& model = detail::child(mj, "model", "bag");
        if (mem.is_forest)
            mem.forest = detail::forest_from_payload(model);
        else
            mem.boosted = detail::boosted_from_payload(model);
        m.members.push_back(std::move(mem));
    }
    check_digest("bag", doc, payload_bag(m));
    return m;
}

// ---------------------------------------------------------------------------
// Encoder.

namespace detail {

inline void write_conv(JsonWriter& w, const ConvLayer& L) {
    w.begin_object();
    w.key("ksize");
    w.value(L.ksize);
    w.key("in_ch");
    w.value(L.in_ch);
    w.key("out_ch");
    w.value(L.out_ch);
    w.key("w");
    w.numbers(L.w);
    w.key("b");
    w.numbers(L.b);
    w.end_object();
}

inline ConvLayer read_conv(const nlohmann::json& j, const char* artifact) {
    ConvLayer L;
    L.ksize = field<int>(j, "ksize", artifact);
    L.in_ch = field<int>(j, "in_ch", artifact);
    L.out_ch = field<int>(j, "out_ch", artifact);
    L.w = field<std::vector<double>>(j, "w", artifact);
    L.b = field<std::vector<double>>(j, "b", artifact);
    size_t want_w = static_cast<size_t>(L.out_ch) * L.ksize * L.ksize * L.in_ch;
    if (L.w.size() != want_w || L.b.size() != static_cast<size_t>(L.out_ch))
        throw LoadError(strfmt("%s: conv layer has inconsistent sizes", artifact));
    return L;
}

inline void write_dense(JsonWriter& w, const DenseLayer& L) {
    w.begin_object();
    w.key("in_dim");
    w.value(L.in_dim);
    w.key("out_dim");
    w.value(L.out_dim);
    w.key("w");
    w.numbers(L.w);
    w.key("b");
    w.numbers(L.b);
    w.end_object();
}

inline DenseLayer read_dense(const nlohmann::json& j, const char* artifact) {
    DenseLayer L;
    L.in_dim = field<int>(j, "in_dim", artifact);
    L.out_dim = field<int>(j, "out_dim", artifact);
    L.w = field<std::vector<double>>(j, "w", artifact);
    L.b = field<std::vector<double>>(j, "b", artifact);
    if (L.w.size() != static_cast<size_t>(L.in_dim) * L.out_dim ||
        L.b.size() != static_cast<size_t>(L.out_dim))
        throw LoadError(strfmt("%s: dense layer has inconsistent sizes", artifact));
    return L;
}

}  // namespace detail

inline std::string payload_encoder(const EncoderModel& m) {
    JsonWriter w;
    w.begin_object();
    w.key("preset");
    w.value(to_string(m.preset));
    w.key("input_size");
    w.value(m.input_size);
    w.key("embedding_dim");
    w.value(m.embedding_dim);
    w.key("has_residual");
    w.value(m.has_residual);
    w.key("convs");
    w.begin_array();
    for (const ConvLayer& L : m.convs) detail::write_conv(w, L);
    w.end_array();
    if (m.has_residual) {
        w.key("res_conv");
        detail::write_conv(w, m.res_conv);
        w.key("res_proj");
        detail::write_conv(w, m.res_proj);
    }
    w.key("fc_embed");
    detail::write_dense(w, m.fc_embed);
    w.key("fc_logits");
    detail::write_dense(w, m.fc_logits);
    w.end_object();
    return w.str();
}

inline std::string save_encoder(const EncoderModel& m) {
    return wrap_document("encoder", payload_encoder(m));
}

namespace detail {

inline EncoderModel encoder_from_payload(const nlohmann::json& p) {
    EncoderModel m;
    m.preset = preset_from_string(field<std::string>(p, "preset", "encoder"));
    m.input_size = field<int>(p, "input_size", "encoder");
    m.embedding_dim = field<int>(p, "embedding_dim", "encoder");
    m.has_residual = field<bool>(p, "has_residual", "encoder");
    const nlohmann::json& convs = child(p, "convs", "encoder");
    for (const auto& cj : convs) m.convs.push_back(read_conv(cj, "encoder"));
    if (m.has_residual) {
        m.res_conv = read_conv(child(p, "res_conv", "encoder"), "encoder");
        m.res_proj = read_conv(child(p, "res_proj", "encoder"), "encoder");
    }
    m.fc_embed = read_dense(child(p, "fc_embed", "encoder"), "encoder");
    m.fc_logits = read_dense(child(p, "fc_logits", "encoder"), "encoder");
    return m;
}

}  // namespace detail

inline EncoderModel load_encoder(const std::string& text) {
    nlohmann::json doc = parse_document(text, "encoder");
    EncoderModel m = detail::encoder_from_payload(doc["payload"]);
    check_digest("encoder", doc, payload_encoder(m));
    return m;
}

// ---------------------------------------------------------------------------
// External MLP.

inline std::string payload_mlp(const Mlp& m) {
    JsonWriter w;
    w.begin_object();
    w.key("config");
    w.begin_object();
    w.key("hidden");
    w.value(m.config.hidden);
    w.key("embed_dim");
    w.value(m.config.embed_dim);
    w.key("learning_rate");
    w.value(m.config.learning_rate);
    w.key("weight_decay");
    w.value(m.config.weight_decay);
    w.key("epochs");
    w.value(m.config.epochs);
    w.key("batch_size");
    w.value(m.config.batch_size);
    w.key("p_mask");
    w.value(m.config.p_mask);
    w.key("seed");
    w.value(m.config.seed);
    w.end_object();
    w.key("l1");
    detail::write_dense(w, m.l1);
    w.key("l2");
    detail::write_dense(w, m.l2);
    w.key("head");
    detail::write_dense(w, m.head);
    w.end_object();
    return w.str();
}

inline std::string save_mlp(const Mlp& m) { return wrap_document("external_mlp", payload_mlp(m)); }

namespace detail {

inline Mlp mlp_from_payload(const nlohmann::json& p) {
    Mlp m;
    const nlohmann::json& c = child(p, "config", "external_mlp");
    m.config.hidden = field<int>(c, "hidden", "external_mlp");
    m.config.embed_dim = field<int>(c, "embed_dim", "external_mlp");
    m.config.learning_rate = field<double>(c, "learning_rate", "external_mlp");
    m.config.weight_decay = field<double>(c, "weight_decay", "external_mlp");
    m.config.epochs = field<int>(c, "epochs", "external_mlp");
    m.config.batch_size = field<int>(c, "batch_size", "external_mlp");
    m.config.p_mask = field<double>(c, "p_mask", "external_mlp");
    m.config.seed = field<uint64_t>(c, "seed", "external_mlp");
    m.l1 = read_dense(child(p, "l1", "external_mlp"), "external_mlp");
    m.l2 = read_dense(child(p, "l2", "external_mlp"), "external_mlp");
    m.head = read_dense(child(p, "head", "external_mlp"), "external_mlp");
    return m;
}

}  // namespace detail

inline Mlp load_mlp(const std::string& text) {
    nlohmann::json doc = parse_document(text, "external_mlp");
    Mlp m = detail::mlp_from_payload(doc["payload"]);
    check_digest("external_mlp", doc, payload_mlp(m));
    return m;
}

// ---------------------------------------------------------------------------
// PCA and refinement stack.

namespace detail {

inline void write_pca(JsonWriter& w, const PcaProjection& p) {
    w.begin_object();
    w.key("mean");
    w.numbers(p.mean);
    w.key("components");
    w.begin_array();
    for (const auto& row : p.components) w.numbers(row);
    w.end_array();
    w.key("explained_variance");
    w.numbers(p.explained_variance);
    w.key("degenerate");
    w.value(p.degenerate);
    w.end_object();
}

inline PcaProjection read_pca(const nlohmann::json& j, const char* artifact) {
    PcaProjection p;
    p.mean = field<std::vector<double>>(j, "mean", artifact);
    p.components = field<std::vector<std::vector<double>>>(j, "components", artifact);
    p.explained_variance = field<std::vector<double>>(j, "explained_variance", artifact);
    p.degenerate = field<bool>(j, "degenerate", artifact);
    for (const auto& row : p.components)
        if (row.size() != p.mean.size())
            throw LoadError(strfmt("%s: pca component length mismatch", artifact));
    return p;
}

}  // namespace detail

inline std::string payload_refine(const RefineStack& s) {
    JsonWriter w;
    w.begin_object();
    w.key("rounds");
    w.value(s.rounds);
    w.key("k");
    w.value(s.k);
    w.key("per_round");
    w.begin_array();
    for (const RefineRound& r : s.per_round) {
        w.begin_object();
        w.key("image");
        detail::write_pca(w, r.image);
        w.key("external");
        detail::write_pca(w, r.external);
        w.key("has_fused");
        w.value(r.has_fused);
        if (r.has_fused) {
            w.key("fused");
            detail::write_pca(w, r.fused);
        }
        w.end_object();
    }
    w.end_array();
    w.end_object();
    return w.str();
}

inline std::string save_refine(const RefineStack& s) {
    return wrap_document("refine", payload_refine(s));
}

namespace detail {

inline RefineStack refine_from_payload(const nlohmann::json& p) {
    RefineStack s;
    s.rounds = field<int>(p, "rounds", "refine");
    s.k = field<int>(p, "k", "refine");
    const nlohmann::json& rounds = child(p, "per_round", "refine");
    for (const auto& rj : rounds) {
        RefineRound r;
        r.image = read_pca(child(rj, "image", "refine"), "refine");
        r.external = read_pca(child(rj, "external", "refine"), "refine");
        r.has_fused = field<bool>(rj, "has_fused", "refine");
        if (r.has_fused) r.fused = read_pca(child(rj, "fused", "refine"), "refine");
        s.per_round.push_back(std::move(r));
    }
    if (static_cast<int>(s.per_round.size()) != s.rounds)
        throw LoadError("refine: rounds does not match per_round length");
    return s;
}

}  // namespace detail

inline RefineStack load_refine(const std::string& text) {
    nlohmann::json doc = parse_document(text, "refine");
    RefineStack s = detail::refine_from_payload(doc["payload"]);
    check_digest("refine", doc, payload_refine(s));
    return s;
}

// ---------------------------------------------------------------------------
// Dense head (fused classifier head).

inline std::string payload_dense_head(const DenseLayer& L) {
    JsonWriter w;
    detail::write_dense(w, L);
    return w.str();
}

inline std::string save_dense_head(const DenseLayer& L) {
    return wrap_document("dense_head", payload_dense_head(L));
}

inline DenseLayer load_dense_head(const std::string& text) {
    nlohmann::json doc = parse_document(text, "dense_head");
    DenseLayer L = detail::read_dense(doc["payload"], "dense_head");
    check_digest("dense_head", doc, payload_dense_head(L));
    return L;
}

// ---------------------------------------------------------------------------
// Gate.

inline std::string payload_gate(const GateState& g) {
    JsonWriter w;
    w.begin_object();
    w.key("beta");
    w.value(g.beta);
    w.key("tau");
    w.value(g.tau);
    w.key("image");
    w.begin_object();
    w.key("mean");
    w.numbers(g.stats[0].mean);
    w.key("var");
    w.numbers(g.stats[0].var);
    w.end_object();
    w.key("external");
    w.begin_object();
    w.key("mean");
    w.numbers(g.stats[1].mean);
    w.key("var");
    w.numbers(g.stats[1].var);
    w.end_object();
    w.end_object();
    return w.str();
}

inline std::string save_gate(const GateState& g) { return wrap_document("gate", payload_gate(g)); }

inline GateState load_gate(const std::string& text) {
    nlohmann::json doc = parse_document(text, "gate");
    const nlohmann::json& p = doc["payload"];
    GateState g;
    g.beta = detail::field<double>(p, "beta", "gate");
    g.tau = detail::field<double>(p, "tau", "gate");
    const char* names[2] = {"image", "external"};
    for (int m = 0; m < 2; ++m) {
        const nlohmann::json& s = detail::child(p, names[m], "gate");
        g.stats[m].mean = detail::field<std::vector<double>>(s, "mean", "gate");
        g.stats[m].var = detail::field<std::vector<double>>(s, "var", "gate");
        if (g.stats[m].mean.size() != g.stats[m].var.size())
            throw LoadError("gate: mean/var length mismatch");
    }
    check_digest("gate", doc, payload_gate(g));
    return g;
}

// ---------------------------------------------------------------------------
// Fused bundle: a directory with one document per component, referenced by
// relative path from fused.json.

namespace detail {

inline void write_train_config(JsonWriter& w, const TrainConfig& c) {
    w.begin_object();
    w.key("learning_rate");
    w.value(c.learning_rate);
    w.key("weight_decay");
    w.value(c.weight_decay);
    w.key("epochs");
    w.value(c.epochs);
    w.key("batch_size");
    w.value(c.batch_size);
    w.key("momentum");
    w.value(c.momentum);
    w.key("align_weight");
    w.value(c.align_weight);
    w.key("seed");
    w.value(c.seed);
    w.end_object();
}

inline TrainConfig read_train_config(const nlohmann::json& j, const char* artifact) {
    TrainConfig c;
    c.learning_rate = field<double>(j, "learning_rate", artifact);
    c.weight_decay = field<double>(j, "weight_decay", artifact);
    c.epochs = field<int>(j, "epochs", artifact);
    c.batch_size = field<int>(j, "batch_size", artifact);
    c.momentum = field<double>(j, "momentum", artifact);
    c.align_weight = field<double>(j, "align_weight", artifact);
    c.seed = field<uint64_t>(j, "seed", artifact);
    return c;
}

}  // namespace detail

inline std::string payload_fused_manifest(const FusedModel& m) {
    JsonWriter w;
    w.begin_object();
    w.key("config");
    w.begin_object();
    w.key("preset");
    w.value(to_string(m.config.preset));
    w.key("embed_dim");
    w.value(m.config.embed_dim);
    w.key("k");
    w.value(m.config.k);
    w.key("rounds");
    w.value(m.config.rounds);
    w.key("align_weight");
    w.value(m.config.align_weight);
    w.key("use_alignment");
    w.value(m.config.use_alignment);
    w.key("use_refinement");
    w.value(m.config.use_refinement);
    w.key("encoder_train");
    detail::write_train_config(w, m.config.encoder_train);
    w.key("external_train");
    w.begin_object();
    w.key("hidden");
    w.value(m.config.external_train.hidden);
    w.key("learning_rate");
    w.value(m.config.external_train.learning_rate);
    w.key("weight_decay");
    w.value(m.config.external_train.weight_decay);
    w.key("epochs");
    w.value(m.config.external_train.epochs);
    w.key("batch_size");
    w.value(m.config.external_train.batch_size);
    w.key("p_mask");
    w.value(m.config.external_train.p_mask);
    w.end_object();
    w.key("head_train");
    w.begin_object();
    w.key("learning_rate");
    w.value(m.config.head_train.learning_rate);
    w.key("weight_decay");
    w.value(m.config.head_train.weight_decay);
    w.key("epochs");
    w.value(m.config.head_train.epochs);
    w.key("batch_size");
    w.value(m.config.head_train.batch_size);
    w.end_object();
    w.key("seed");
    w.value(m.config.seed);
    w.end_object();  // config
    w.key("files");
    w.begin_object();
    w.key("external");
    w.value("external.json");
    w.key("image");
    w.value("image.json");
    w.key("refine");
    w.value("refine.json");
    w.key("head");
    w.value("head.json");
    w.end_object();
    w.end_object();
    return w.str();
}

inline void save_fused(const FusedModel& m, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_text_file(dir / "external.json", save_mlp(m.external));
    write_text_file(dir / "image.json", save_encoder(m.image));
    write_text_file(dir / "refine.json", save_refine(m.refine_stack));
    write_text_file(dir / "head.json", save_dense_head(m.head));
    write_text_file(dir / "fused.json",
                    wrap_document("fused", payload_fused_manifest(m)));
}

inline FusedModel load_fused(const std::filesystem::path& dir) {
    nlohmann::json doc = parse_document(read_text_file(dir / "fused.json"), "fused");
    const nlohmann::json& p = doc["payload"];
    FusedModel m;
    const nlohmann::json& c = detail::child(p, "config", "fused");
    m.config.preset = preset_from_string(detail::field<std::string>(c, "preset", "fused"));
    m.config.embed_dim = detail::field<int>(c, "embed_dim", "fused");
    m.config.k = detail::field<int>(c, "k", "fused");
    m.config.rounds = detail::field<int>(c, "rounds", "fused");
    m.config.align_weight = detail::field<double>(c, "align_weight", "fused");
    m.config.use_alignment = detail::field<bool>(c, "use_alignment", "fused");
    m.config.use_refinement = detail::field<bool>(c, "use_refinement", "fused");
    m.config.encoder_train =
        detail::read_train_config(detail::child(c, "encoder_train", "fused"), "fused");
    const nlohmann::json& e = detail::child(c, "external_train", "fused");
    m.config.external_train.hidden = detail::field<int>(e, "hidden", "fused");
    m.config.external_train.learning_rate = detail::field<double>(e, "learning_rate", "fused");
    m.config.external_train.weight_decay = detail::field<double>(e, "weight_decay", "fused");
    m.config.external_train.epochs = detail::field<int>(e, "epochs", "fused");
    m.config.external_train.batch_size = detail::field<int>(e, "batch_size", "fused");
    m.config.external_train.p_mask = detail::field<double>(e, "p_mask", "fused");
    const nlohmann::json& h = detail::child(c, "head_train", "fused");
    m.config.head_train.learning_rate = detail::field<double>(h, "learning_rate", "fused");
    m.config.head_train.weight_decay = detail::field<double>(h, "weight_decay", "fused");
    m.config.head_train.epochs = detail::field<int>(h, "epochs", "fused");
    m.config.head_train.batch_size = detail::field<int>(h, "batch_size", "fused");
    m.config.seed = detail::field<uint64_t>(c, "seed", "fused");

    const nlohmann::json& files = detail::child(p, "files", "fused");
    m.external =
        load_mlp(read_text_file(dir / detail::field<std::string>(files, "external", "fused")));
    m.image =
        load_encoder(read_text_file(dir / detail::field<std::string>(files, "image", "fused")));
    m.refine_stack =
        load_refine(read_text_file(dir / detail::field<std::string>(files, "refine", "fused")));
    m.head =
        load_dense_head(read_text_file(dir / detail::field<std::string>(files, "head", "fused")));
    check_digest("fused", doc, payload_fused_manifest(m));
    return m;
}

}  // namespace oanet
