#include "alora/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <vector>

namespace alora {

namespace {

constexpr const char* kMagic = "ALORA-CKPT";
constexpr int kVersion = 1;

struct Entry {
    std::string name;
    std::string dtype;  // "f64" or "u8"
    Shape shape;
    const Tensor* tensor = nullptr;                 // f64 source
    const std::vector<GateState>* states = nullptr; // u8 source
};

void collect(const SuperNetwork& model, std::vector<Entry>& out) {
    auto f64 = [&out](std::string name, const Tensor& t) {
        out.push_back({std::move(name), "f64", t.shape(), &t, nullptr});
    };
    f64("tok_embed", model.tok_embed);
    f64("pos_embed", model.pos_embed);
    for (size_t l = 0; l < model.blocks.size(); ++l) {
        const BlockWeights& b = model.blocks[l];
        std::string p = "b" + std::to_string(l) + ".base.";
        f64(p + "wq", b.w_q);
        f64(p + "wk", b.w_k);
        f64(p + "wv", b.w_v);
        f64(p + "wo", b.w_o);
        f64(p + "wu", b.w_u);
        f64(p + "wd", b.w_d);
        f64(p + "bu", b.b_u);
        f64(p + "bd", b.b_d);
    }
    for (const auto& row : model.adapters) {
        for (const GatedLoraAdapter& a : row) {
            f64(a.module_id + ".A", a.w_a);
            f64(a.module_id + ".B", a.w_b);
            f64(a.module_id + ".gate", a.gate_logits);
            out.push_back({a.module_id + ".state",
                           "u8",
                           {static_cast<int64_t>(a.gate_state.size())},
                           nullptr,
                           &a.gate_state});
        }
    }
}

}  // namespace

void save_checkpoint(const std::string& path, const SuperNetwork& model) {
    std::vector<Entry> entries;
    collect(model, entries);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("save_checkpoint: cannot open " + path);

    f << kMagic << "\n";
    f << "version " << kVersion << "\n";
    f << "layers " << model.config.layers << "\n";
    f << "d " << model.config.d << "\n";
    f << "heads " << model.config.heads << "\n";
    f << "d_ff " << model.config.d_ff << "\n";
    f << "vocab " << model.config.vocab << "\n";
    f << "max_seq_len " << model.config.max_seq_len << "\n";
    f << "activation "
      << (model.config.activation == Activation::relu ? "relu" : "gelu") << "\n";
    f << "budget " << model.budget << "\n";
    f << "tensors " << entries.size() << "\n";
    for (const Entry& e : entries) {
        f << e.name << " " << e.dtype << " " << e.shape.size();
        for (int64_t d : e.shape) f << " " << d;
        f << "\n";
    }
    f << "DATA\n";
    for (const Entry& e : entries) {
        if (e.dtype == "f64") {
            auto span = e.tensor->data();
            f.write(reinterpret_cast<const char*>(span.data()),
                    static_cast<std::streamsize>(span.size() * sizeof(double)));
        } else {
            for (GateState s : *e.states) {
                char c = static_cast<char>(s);
                f.write(&c, 1);
            }
        }
    }
    if (!f) throw IoError("save_checkpoint: write failed for " + path);
}

SuperNetwork load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_checkpoint: cannot open " + path);

    std::string line;
    auto next_line = [&]() {
        if (!std::getline(f, line)) {
            throw IoError("load_checkpoint: truncated header in " + path);
        }
        return line;
    };
    if (next_line() != kMagic) {
        throw IoError("load_checkpoint: bad magic in " + path);
    }

    ModelConfig cfg;
    int64_t budget = 0;
    size_t tensor_count = 0;
    std::string key;
    while (true) {
        std::istringstream ls(next_line());
        ls >> key;
        if (key == "version") {
            int v;
            ls >> v;
            if (v != kVersion) {
                throw IoError("load_checkpoint: unsupported version " +
                              std::to_string(v));
            }
        } else if (key == "layers") {
            ls >> cfg.layers;
        } else if (key == "d") {
            ls >> cfg.d;
        } else if (key == "heads") {
            ls >> cfg.heads;
        } else if (key == "d_ff") {
            ls >> cfg.d_ff;
        } else if (key == "vocab") {
            ls >> cfg.vocab;
        } else if (key == "max_seq_len") {
            ls >> cfg.max_seq_len;
        } else if (key == "activation") {
            std::string a;
            ls >> a;
            cfg.activation = a == "relu" ? Activation::relu : Activation::gelu;
        } else if (key == "budget") {
            ls >> budget;
        } else if (key == "tensors") {
            ls >> tensor_count;
            break;
        } else {
            throw IoError("load_checkpoint: unknown header key '" + key + "'");
        }
    }

    struct RawEntry {
        std::string name;
        std::string dtype;
        Shape shape;
        std::vector<double> f64;
        std::vector<GateState> u8;
    };
    std::vector<RawEntry> entries(tensor_count);
    for (RawEntry& e : entries) {
        std::istringstream ls(next_line());
        size_t ndim;
        ls >> e.name >> e.dtype >> ndim;
        e.shape.resize(ndim);
        for (size_t i = 0; i < ndim; ++i) ls >> e.shape[i];
        if (!ls) throw IoError("load_checkpoint: malformed tensor table entry");
    }
    if (next_line() != "DATA") {
        throw IoError("load_checkpoint: missing DATA marker");
    }
    for (RawEntry& e : entries) {
        size_t n = static_cast<size_t>(numel(e.shape));
        if (e.dtype == "f64") {
            e.f64.resize(n);
            f.read(reinterpret_cast<char*>(e.f64.data()),
                   static_cast<std::streamsize>(n * sizeof(double)));
        } else if (e.dtype == "u8") {
            std::vector<char> buf(n);
            f.read(buf.data(), static_cast<std::streamsize>(n));
            e.u8.resize(n);
            for (size_t i = 0; i < n; ++i) e.u8[i] = static_cast<GateState>(buf[i]);
        } else {
            throw IoError("load_checkpoint: unknown dtype " + e.dtype);
        }
        if (!f) throw IoError("load_checkpoint: truncated data in " + path);
    }

    auto find = [&entries, &path](const std::string& name) -> RawEntry& {
        for (RawEntry& e : entries) {
            if (e.name == name) return e;
        }
        throw IoError("load_checkpoint: tensor '" + name + "' missing in " + path);
    };

    cfg.validate();
    SuperNetwork net;
    net.config = cfg;
    net.budget = budget;

    auto frozen = [&find](const std::string& name) {
        RawEntry& e = find(name);
        return Tensor::from(e.shape, std::move(e.f64));
    };
    net.tok_embed = frozen("tok_embed");
    net.pos_embed = frozen("pos_embed");
    {
        std::vector<double> u(static_cast<size_t>(cfg.d * cfg.vocab));
        for (int64_t t = 0; t < cfg.vocab; ++t) {
            for (int64_t j = 0; j < cfg.d; ++j) {
                u[static_cast<size_t>(j * cfg.vocab + t)] = net.tok_embed.at(t, j);
            }
        }
        net.unembed = Tensor::from({cfg.d, cfg.vocab}, std::move(u));
    }
    for (int64_t l = 0; l < cfg.layers; ++l) {
        std::string p = "b" + std::to_string(l) + ".base.";
        BlockWeights b;
        b.w_q = frozen(p + "wq");
        b.w_k = frozen(p + "wk");
        b.w_v = frozen(p + "wv");
        b.w_o = frozen(p + "wo");
        b.w_u = frozen(p + "wu");
        b.w_d = frozen(p + "wd");
        b.b_u = frozen(p + "bu");
        b.b_d = frozen(p + "bd");
        net.blocks.push_back(std::move(b));

        std::vector<GatedLoraAdapter> row;
        for (int64_t m = 0; m < kModulesPerBlock; ++m) {
            std::string id = "b" + std::to_string(l) + "." + kModuleNames[m];
            GatedLoraAdapter a;
            a.module_id = id;
            RawEntry& wa = find(id + ".A");
            RawEntry& wb = find(id + ".B");
            RawEntry& gl = find(id + ".gate");
            RawEntry& st = find(id + ".state");
            a.w_a = Tensor::param(id + ".A", wa.shape, std::move(wa.f64));
            a.w_b = Tensor::param(id + ".B", wb.shape, std::move(wb.f64));
            a.gate_logits = Tensor::param(id + ".gate", gl.shape, std::move(gl.f64));
            a.gate_state = std::move(st.u8);
            row.push_back(std::move(a));
        }
        net.adapters.push_back(std::move(row));
    }
    return net;
}

}  // namespace alora
