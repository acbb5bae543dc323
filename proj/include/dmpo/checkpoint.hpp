#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmpo/net.hpp"

namespace dmpo {

// On-disk network format. File = magic "DMPO1" followed by records of
// (u32 name length, name bytes, u32 dimension count, i32 dims, f64
// payload of prod(dims) values), all little-endian, read until EOF.
// Each network stores one record per tensor ("<net>.W0" [rows, cols]
// row-major, "<net>.b0" [n], ...); the Adam moments follow in the same
// record shape ("<net>.adam_m", "<net>.adam_v", "<net>.adam_t").
struct CheckpointEntry {
    std::string name;
    std::vector<int32_t> dims;
    std::vector<double> data;
};

inline constexpr char kCheckpointMagic[5] = {'D', 'M', 'P', 'O', '1'};

namespace detail {

template <typename T>
void write_raw(std::ostream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in) {
    T value;
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    return value;
}

}  // namespace detail

inline void write_checkpoint(const std::string& path,
                             const std::vector<CheckpointEntry>& entries) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + path);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    for (const auto& e : entries) {
        size_t expected = e.dims.empty() ? 0 : 1;
        for (int32_t d : e.dims) expected *= static_cast<size_t>(d);
        if (expected != e.data.size())
            throw std::invalid_argument("checkpoint: dims do not match payload for " + e.name);
        detail::write_raw(out, static_cast<uint32_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        detail::write_raw(out, static_cast<uint32_t>(e.dims.size()));
        for (int32_t d : e.dims) detail::write_raw(out, d);
        out.write(reinterpret_cast<const char*>(e.data.data()),
                  static_cast<std::streamsize>(e.data.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[sizeof(kCheckpointMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);

    std::vector<CheckpointEntry> entries;
    while (true) {
        uint32_t name_len;
        in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
        if (in.eof()) break;
        if (!in) throw std::runtime_error("checkpoint: truncated file");
        CheckpointEntry e;
        e.name.resize(name_len);
        in.read(e.name.data(), name_len);
        uint32_t ndims = detail::read_raw<uint32_t>(in);
        e.dims.resize(ndims);
        size_t count = ndims == 0 ? 0 : 1;
        for (uint32_t i = 0; i < ndims; ++i) {
            e.dims[i] = detail::read_raw<int32_t>(in);
            if (e.dims[i] < 0) throw std::runtime_error("checkpoint: negative dimension");
            count *= static_cast<size_t>(e.dims[i]);
        }
        e.data.resize(count);
        in.read(reinterpret_cast<char*>(e.data.data()),
                static_cast<std::streamsize>(count * sizeof(double)));
        if (!in) throw std::runtime_error("checkpoint: truncated payload for " + e.name);
        entries.push_back(std::move(e));
    }
    return entries;
}

// A named network plus its optimizer state, the unit the trainer saves.
struct NamedNet {
    std::string name;
    const Mlp* net = nullptr;
    const AdamState* adam = nullptr;
};

inline std::vector<CheckpointEntry> checkpoint_entries(const std::vector<NamedNet>& nets) {
    std::vector<CheckpointEntry> entries;
    for (const auto& n : nets) {
        for (int l = 0; l < n.net->layers(); ++l) {
            const MatrixXd& w = n.net->W[static_cast<size_t>(l)];
            CheckpointEntry we;
            we.name = n.name + ".W" + std::to_string(l);
            we.dims = {static_cast<int32_t>(w.rows()), static_cast<int32_t>(w.cols())};
            we.data.reserve(static_cast<size_t>(w.size()));
            for (int r = 0; r < w.rows(); ++r)
                for (int c = 0; c < w.cols(); ++c) we.data.push_back(w(r, c));
            entries.push_back(std::move(we));

            const VectorXd& b = n.net->b[static_cast<size_t>(l)];
            CheckpointEntry be;
            be.name = n.name + ".b" + std::to_string(l);
            be.dims = {static_cast<int32_t>(b.size())};
            be.data.assign(b.data(), b.data() + b.size());
            entries.push_back(std::move(be));
        }
    }
    for (const auto& n : nets) {
        if (!n.adam) continue;
        CheckpointEntry m;
        m.name = n.name + ".adam_m";
        m.dims = {static_cast<int32_t>(n.adam->m.size())};
        m.data.assign(n.adam->m.data(), n.adam->m.data() + n.adam->m.size());
        CheckpointEntry v;
        v.name = n.name + ".adam_v";
        v.dims = {static_cast<int32_t>(n.adam->v.size())};
        v.data.assign(n.adam->v.data(), n.adam->v.data() + n.adam->v.size());
        CheckpointEntry t;
        t.name = n.name + ".adam_t";
        t.dims = {1};
        t.data = {static_cast<double>(n.adam->step)};
        entries.push_back(std::move(m));
        entries.push_back(std::move(v));
        entries.push_back(std::move(t));
    }
    return entries;
}

inline const CheckpointEntry* find_entry(const std::vector<CheckpointEntry>& entries,
                                         const std::string& name) {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

// Rebuilds an Mlp from its per-tensor records; layer sizes come from the
// weight shapes.
inline Mlp mlp_from_entries(const std::vector<CheckpointEntry>& entries,
                            const std::string& name) {
    Mlp net;
    for (int l = 0;; ++l) {
        const CheckpointEntry* we = find_entry(entries, name + ".W" + std::to_string(l));
        const CheckpointEntry* be = find_entry(entries, name + ".b" + std::to_string(l));
        if (!we || !be) {
            if (l == 0)
                throw std::runtime_error("checkpoint: no records for network " + name);
            break;
        }
        if (we->dims.size() != 2 || be->dims.size() != 1)
            throw std::runtime_error("checkpoint: malformed tensor dims for " + name);
        int rows = we->dims[0], cols = we->dims[1];
        MatrixXd w(rows, cols);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
                w(r, c) = we->data[static_cast<size_t>(r) * cols + static_cast<size_t>(c)];
        VectorXd b = Eigen::Map<const VectorXd>(be->data.data(),
                                                static_cast<long>(be->data.size()));
        if (l == 0) net.sizes.push_back(cols);
        net.sizes.push_back(rows);
        net.W.push_back(std::move(w));
        net.b.push_back(std::move(b));
    }
    return net;
}

inline void restore_adam(const std::vector<CheckpointEntry>& entries,
                         const std::string& name, AdamState& state) {
    const CheckpointEntry* m = find_entry(entries, name + ".adam_m");
    const CheckpointEntry* v = find_entry(entries, name + ".adam_v");
    const CheckpointEntry* t = find_entry(entries, name + ".adam_t");
    if (!m || !v || !t) return;  // inference-only checkpoint
    state.m = Eigen::Map<const VectorXd>(m->data.data(), static_cast<long>(m->data.size()));
    state.v = Eigen::Map<const VectorXd>(v->data.data(), static_cast<long>(v->data.size()));
    state.step = static_cast<long>(t->data.at(0));
}

}  // namespace dmpo
