// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lpn/error.hpp"
#include "lpn/tensor.hpp"

namespace lpn {

enum class Split { Train, Validation, Test };

inline const char* split_name(Split s) {
    switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "validation" || s == "val") return Split::Validation;
    if (s == "test") return Split::Test;
    throw FormatError("unknown split '" + s + "'");
}

/// A sentence as a token-major T x d matrix plus its global label ids.
/// The d x T matrix H of the attention equations is the transpose of `tokens`.
struct Sentence {
    std::uint32_t id = 0;
    Tensor tokens;
    std::vector<std::uint32_t> labels;

    std::size_t length() const { return tokens.rows(); }
    bool has_label(std::uint32_t label) const {
        return std::find(labels.begin(), labels.end(), label) != labels.end();
    }
    friend bool operator==(const Sentence&, const Sentence&) = default;
};

struct LabelDescription {
    std::uint32_t id = 0;
    std::string name;
    Tensor tokens;
    friend bool operator==(const LabelDescription&, const LabelDescription&) = default;
};

struct Dataset {
    std::uint32_t d = 0;
    std::vector<Sentence> sentences;
    std::vector<LabelDescription> labels;
    /// Label id -> split. A label absent from the map belongs to no split.
    std::map<std::uint32_t, Split> split;

    const LabelDescription& label(std::uint32_t id) const {
        for (const auto& l : labels)
            if (l.id == id) return l;
        throw FormatError("unknown label " + std::to_string(id));
    }

    /// Label ids of one split, ascending.
    std::vector<std::uint32_t> classes_in(Split s) const {
        std::vector<std::uint32_t> out;
        for (const auto& [id, sp] : split)
            if (sp == s) out.push_back(id);
        return out;
    }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Rounds every entry to the nearest 32-bit float, the storage precision.
inline void round_to_storage(Tensor& t) {
    for (double& x : t.data()) x = static_cast<double>(static_cast<float>(x));
}

/// Checks every dataset invariant; throws FormatError naming the violation.
inline void validate(const Dataset& ds) {
    if (ds.d == 0) throw FormatError("inconsistent d: embedding width is zero");
    std::set<std::uint32_t> label_ids;
    for (const auto& l : ds.labels) {
        if (!label_ids.insert(l.id).second) throw FormatError("duplicate label id " + std::to_string(l.id));
        if (l.tokens.rank() != 2 || l.tokens.rows() == 0)
            throw FormatError("label " + std::to_string(l.id) + " description has no tokens");
        if (l.tokens.cols() != ds.d)
            throw FormatError("inconsistent d: label " + std::to_string(l.id) + " has width " +
                              std::to_string(l.tokens.cols()) + ", expected " + std::to_string(ds.d));
        if (!l.tokens.all_finite()) throw FormatError("label " + std::to_string(l.id) + " has non-finite tokens");
    }
    for (const auto& s : ds.sentences) {
        const std::string who = "sentence " + std::to_string(s.id);
        if (s.tokens.rank() != 2 || s.tokens.rows() == 0) throw FormatError(who + " has no tokens");
        if (s.tokens.cols() != ds.d)
            throw FormatError("inconsistent d: " + who + " has width " + std::to_string(s.tokens.cols()) +
                              ", expected " + std::to_string(ds.d));
        if (!s.tokens.all_finite()) throw FormatError(who + " has non-finite tokens");
        if (s.labels.empty()) throw FormatError(who + " has no labels");
        std::set<std::uint32_t> seen;
        for (auto l : s.labels) {
            if (!label_ids.count(l)) throw FormatError("unknown label " + std::to_string(l) + " in " + who);
            if (!seen.insert(l).second) throw FormatError(who + " lists label " + std::to_string(l) + " twice");
        }
    }
    // One split per label makes the train/validation/test sets disjoint by
    // construction; only dangling entries need checking.
    for (const auto& [id, sp] : ds.split)
        if (!label_ids.count(id)) throw FormatError("unknown label " + std::to_string(id) + " in split map");
}

namespace lpnd {

inline constexpr char kMagic[4] = {'L', 'P', 'N', 'D'};
inline constexpr std::uint32_t kVersion = 1;

class Writer {
public:
    explicit Writer(std::vector<char>& out) : out_(out) {}

    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void bytes(const char* p, std::size_t n) { out_.insert(out_.end(), p, p + n); }

    void matrix(const Tensor& t) {
        for (double x : t.data()) f32(static_cast<float>(x));
    }

private:
    std::vector<char>& out_;
};

class Reader {
public:
    explicit Reader(const std::vector<char>& in) : in_(in) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }

    std::string text(std::size_t n) {
        need(n);
        std::string s(in_.data() + pos_, n);
        pos_ += n;
        return s;
    }

    Tensor matrix(std::size_t rows, std::size_t cols) {
        // Check the remaining size before allocating so a corrupt header cannot
        // request an absurd buffer.
        need(rows * cols * 4);
        std::vector<double> data(rows * cols);
        for (auto& x : data) x = static_cast<double>(f32());
        return Tensor({rows, cols}, std::move(data));
    }

    bool at_end() const { return pos_ == in_.size(); }

private:
    void need(std::size_t n) const {
        if (in_.size() - pos_ < n) throw FormatError("unexpected end of file");
    }

    const std::vector<char>& in_;
    std::size_t pos_ = 0;
};

inline std::vector<char> encode(const Dataset& ds) {
    std::vector<char> buf;
    Writer w(buf);
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    w.u32(ds.d);
    w.u32(static_cast<std::uint32_t>(ds.labels.size()));
    w.u32(static_cast<std::uint32_t>(ds.sentences.size()));
    for (const auto& l : ds.labels) {
        w.u32(l.id);
        w.u32(static_cast<std::uint32_t>(l.name.size()));
        w.bytes(l.name.data(), l.name.size());
        w.u32(static_cast<std::uint32_t>(l.tokens.rows()));
        w.matrix(l.tokens);
    }
    for (const auto& s : ds.sentences) {
        w.u32(s.id);
        w.u32(static_cast<std::uint32_t>(s.tokens.rows()));
        w.matrix(s.tokens);
        w.u32(static_cast<std::uint32_t>(s.labels.size()));
        for (auto l : s.labels) w.u32(l);
    }
    return buf;
}

inline Dataset decode(const std::vector<char>& bytes) {
    if (bytes.size() < 8 || !std::equal(kMagic, kMagic + 4, bytes.begin()))
        throw FormatError("unsupported format: missing LPND magic");
    Reader r(bytes);
    r.text(4);
    const std::uint32_t version = r.u32();
    if (version != kVersion) throw FormatError("unsupported format: version " + std::to_string(version));
    Dataset ds;
    ds.d = r.u32();
    const std::uint32_t n_labels = r.u32();
    const std::uint32_t n_sentences = r.u32();
    for (std::uint32_t i = 0; i < n_labels; ++i) {
        LabelDescription l;
        l.id = r.u32();
        l.name = r.text(r.u32());
        const std::uint32_t t = r.u32();
        l.tokens = r.matrix(t, ds.d);
        ds.labels.push_back(std::move(l));
    }
    for (std::uint32_t i = 0; i < n_sentences; ++i) {
        Sentence s;
        s.id = r.u32();
        const std::uint32_t t = r.u32();
        s.tokens = r.matrix(t, ds.d);
        const std::uint32_t n = r.u32();
        for (std::uint32_t k = 0; k < n; ++k) s.labels.push_back(r.u32());
        ds.sentences.push_back(std::move(s));
    }
    if (!r.at_end()) throw FormatError("trailing bytes after last sentence");
    return ds;
}

} // namespace lpnd

/// Sidecar holding the label split as {"label name": "train" | "validation" | "test"}.
inline std::filesystem::path splits_path_for(const std::filesystem::path& dataset_path) {
    return std::filesystem::path(dataset_path.string() + ".splits.json");
}

inline nlohmann::json splits_to_json(const Dataset& ds) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [id, sp] : ds.split) {
        const std::string& name = ds.label(id).name;
        if (j.contains(name)) throw FormatError("label name '" + name + "' is not unique; cannot write split map");
        j[name] = split_name(sp);
    }
    return j;
}

/// Applies a label-name keyed split map. Names not present in the dataset
/// are an error.
inline void apply_splits(Dataset& ds, const nlohmann::json& j) {
    if (!j.is_object()) throw FormatError("split map must be a JSON object");
    std::map<std::string, std::uint32_t> by_name;
    for (const auto& l : ds.labels) by_name.emplace(l.name, l.id);
    ds.split.clear();
    for (const auto& [name, value] : j.items()) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw FormatError("unknown label '" + name + "' in split map");
        if (!value.is_string()) throw FormatError("split for '" + name + "' must be a string");
        ds.split[it->second] = parse_split(value.get<std::string>());
    }
}

inline void load_splits(Dataset& ds, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open split map " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("split map " + path.string() + ": " + e.what());
    }
    apply_splits(ds, j);
}

/// Writes the LPND file and, when the dataset carries a split, the
/// `<path>.splits.json` sidecar. Token payloads are stored as 32-bit floats.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
    validate(ds);
    const auto bytes = lpnd::encode(ds);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + path.string());
    const auto sidecar = splits_path_for(path);
    if (!ds.split.empty()) {
        std::ofstream js(sidecar, std::ios::trunc);
        if (!js) throw Error("cannot write " + sidecar.string());
        js << splits_to_json(ds).dump(2) << '\n';
    } else if (std::filesystem::exists(sidecar)) {
        std::filesystem::remove(sidecar);
    }
}

/// Reads and validates an LPND file. If `splits` is given it is applied;
/// otherwise the `<path>.splits.json` sidecar is used when present.
inline Dataset load_dataset(const std::filesystem::path& path,
                            const std::optional<std::filesystem::path>& splits = std::nullopt) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open dataset " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Dataset ds = lpnd::decode(bytes);
    if (splits) {
        load_splits(ds, *splits);
    } else if (std::filesystem::exists(splits_path_for(path))) {
        load_splits(ds, splits_path_for(path));
    }
    validate(ds);
    return ds;
}

} // namespace lpn
