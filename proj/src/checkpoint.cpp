#include "ttgan/checkpoint.hpp"

#include <set>

#include "ttgan/errors.hpp"
#include "ttgan/tt.hpp"
#include "ttgan/volume_io.hpp"

namespace ttgan {

namespace {

std::span<const std::uint8_t> as_bytes(const std::string& s) {
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

const DenseTensor& single(const Checkpoint& c, const std::string& name, const Shape& shape) {
    const auto* s = c.find(name);
    if (!s) throw ArgumentError("checkpoint has no section '" + name + "'");
    if (s->tensors.size() != 1 || s->tensors[0].shape() != shape) {
        throw ArgumentError("checkpoint section '" + name + "' does not match the configured network (expected " +
                            shape_to_string(shape) + ")");
    }
    return s->tensors[0];
}

}  // namespace

const CheckpointSection* Checkpoint::find(const std::string& name) const {
    for (const auto& s : sections)
        if (s.name == name) return &s;
    return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
    std::vector<std::uint8_t> out{'T', 'T', 'G', '1'};
    le::put_u32(out, static_cast<std::uint32_t>(c.config_text.size()));
    le::put_bytes(out, as_bytes(c.config_text));
    le::put_u32(out, static_cast<std::uint32_t>(c.sections.size()));
    for (const auto& s : c.sections) {
        le::put_u32(out, static_cast<std::uint32_t>(s.name.size()));
        le::put_bytes(out, as_bytes(s.name));
        const auto payload = encode_cores(s.tensors);
        le::put_u32(out, static_cast<std::uint32_t>(payload.size()));
        le::put_bytes(out, payload);
    }
    return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    le::Reader r(bytes);
    r.expect_magic("TTG1");
    Checkpoint c;
    const auto text_len = r.u32("config length");
    const auto text = r.bytes(text_len, "config text");
    c.config_text.assign(text.begin(), text.end());
    const auto count = r.u32("section count");
    std::set<std::string> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.u32("section name length");
        const auto name = r.bytes(name_len, "section name");
        CheckpointSection s{std::string(name.begin(), name.end()), {}};
        if (!seen.insert(s.name).second) throw FormatError("duplicate section '" + s.name + "'", r.offset());
        const auto payload_len = r.u32("section payload length");
        const std::size_t base = r.offset();
        const auto payload = r.bytes(payload_len, "section payload");
        try {
            s.tensors = decode_cores(payload);
        } catch (const FormatError& e) {
            throw FormatError("section '" + s.name + "': " + e.what(), base + e.offset());
        }
        c.sections.push_back(std::move(s));
    }
    if (r.remaining() != 0) {
        throw FormatError(std::to_string(r.remaining()) + " trailing bytes after checkpoint", r.offset());
    }
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    write_file_bytes(path, encode_checkpoint(c));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

Checkpoint state_to_checkpoint(ThreePlayerState& s) {
    Checkpoint c;
    c.config_text = config_to_text(s.config());
    for (const char* player : {"classifier", "discriminator", "generator"}) {
        const auto& ps = s.params(player);
        const auto& vs = s.velocity(player);
        for (const Param* p : ps) c.sections.push_back({"param/" + p->name, {p->value}});
        for (std::size_t i = 0; i < ps.size(); ++i) c.sections.push_back({"velocity/" + ps[i]->name, {vs[i]}});
    }
    for (const BatchNorm* bn : s.batch_norms())
        c.sections.push_back({"running/" + bn->name(), {bn->running_mean, bn->running_var}});
    c.sections.push_back({"meta/epoch", {DenseTensor({1}, static_cast<double>(s.epoch))}});
    c.sections.push_back(
        {"meta/counters",
         {DenseTensor({4}, std::vector<double>{double(s.counters.steps), double(s.counters.labeled_samples),
                                               double(s.counters.unlabeled_samples),
                                               double(s.counters.unlabeled_batches)})}});
    return c;
}

std::unique_ptr<ThreePlayerState> state_from_checkpoint(const Checkpoint& c) {
    auto s = std::make_unique<ThreePlayerState>(config_from_text(c.config_text));
    for (const char* player : {"classifier", "discriminator", "generator"}) {
        auto& ps = s->params(player);
        auto& vs = s->velocity(player);
        for (std::size_t i = 0; i < ps.size(); ++i) {
            ps[i]->value = single(c, "param/" + ps[i]->name, ps[i]->value.shape());
            vs[i] = single(c, "velocity/" + ps[i]->name, vs[i].shape());
        }
    }
    for (BatchNorm* bn : s->batch_norms()) {
        const auto* sec = c.find("running/" + bn->name());
        if (!sec || sec->tensors.size() != 2 || sec->tensors[0].shape() != bn->running_mean.shape() ||
            sec->tensors[1].shape() != bn->running_var.shape()) {
            throw ArgumentError("checkpoint section 'running/" + bn->name() + "' missing or mismatched");
        }
        bn->running_mean = sec->tensors[0];
        bn->running_var = sec->tensors[1];
    }
    s->epoch = static_cast<std::size_t>(single(c, "meta/epoch", {1})[0]);
    const auto& k = single(c, "meta/counters", {4});
    s->counters = {static_cast<std::size_t>(k[0]), static_cast<std::size_t>(k[1]), static_cast<std::size_t>(k[2]),
                   static_cast<std::size_t>(k[3])};
    return s;
}

void save_state(const std::filesystem::path& path, ThreePlayerState& s) {
    save_checkpoint(path, state_to_checkpoint(s));
}

std::unique_ptr<ThreePlayerState> load_state(const std::filesystem::path& path) {
    return state_from_checkpoint(load_checkpoint(path));
}

}  // namespace ttgan
