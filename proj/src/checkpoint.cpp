#include "flowproto/checkpoint.hpp"

#include "flowproto/errors.hpp"
#include "flowproto/io.hpp"

#include <algorithm>
#include <vector>

namespace flowproto {
namespace {

constexpr std::string_view kMagic = "FPRO";

enum class Tag : std::uint8_t { kStandardizer = 0, kActNorm = 1, kInvLinear = 2, kCoupling = 3 };

using Field = std::vector<double>;

Field field(const Vector& v) { return Field(v.data(), v.data() + v.size()); }

Field field(const Matrix& m) {
  Field out;
  out.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out.push_back(m(r, c));
  return out;
}

void write_layer(ByteWriter& w, Tag tag, const std::vector<Field>& fields) {
  w.u8(static_cast<std::uint8_t>(tag));
  w.u32(static_cast<std::uint32_t>(fields.size()));
  for (const auto& f : fields) w.u32(static_cast<std::uint32_t>(f.size()));
  for (const auto& f : fields)
    for (double v : f) w.f64(v);
}

struct RawLayer {
  Tag tag;
  std::size_t offset;
  std::vector<Field> fields;
};

[[noreturn]] void malformed(const std::string& what, std::size_t offset) {
  throw ParseError("checkpoint: " + what + " (layer at byte " + std::to_string(offset) + ")", offset);
}

Vector to_vector(const Field& f) { return Eigen::Map<const Vector>(f.data(), static_cast<Eigen::Index>(f.size())); }

Matrix to_matrix(const Field& f, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = f[k++];
  return m;
}

void expect_sizes(const RawLayer& l, const std::vector<std::size_t>& sizes) {
  if (l.fields.size() != sizes.size()) malformed("unexpected field count", l.offset);
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (l.fields[i].size() != sizes[i]) {
      malformed("field " + std::to_string(i) + " has length " + std::to_string(l.fields[i].size()) +
                    ", expected " + std::to_string(sizes[i]),
                l.offset);
    }
  }
}

}  // namespace

std::string encode_checkpoint(const FlowModel& model) {
  ByteWriter w;
  w.raw(kMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(model.dim()));
  w.u32(static_cast<std::uint32_t>(model.layers().size() + 1));

  const Standardizer& st = model.standardizer();
  write_layer(w, Tag::kStandardizer, {field(st.mean), field(st.scale)});
  for (const auto& layer : model.layers()) {
    if (const auto* a = std::get_if<ActNorm>(&layer)) {
      write_layer(w, Tag::kActNorm, {field(a->log_scale), field(a->bias), Field{a->initialized ? 1.0 : 0.0}});
    } else if (const auto* l = std::get_if<InvLinear>(&layer)) {
      Field perm(l->permutation.begin(), l->permutation.end());
      write_layer(w, Tag::kInvLinear,
                  {perm, field(l->lower), field(l->upper), field(l->log_diag), field(l->sign)});
    } else {
      const auto& c = std::get<AffineCoupling>(layer);
      write_layer(w, Tag::kCoupling,
                  {Field{static_cast<double>(c.parity)}, Field{c.clamp}, field(c.net.w1), field(c.net.b1),
                   field(c.net.w2), field(c.net.b2), field(c.net.w3), field(c.net.b3)});
    }
  }
  return seal_with_crc(w.take());
}

FlowModel decode_checkpoint(std::string_view bytes) {
  std::string_view payload = verify_crc(bytes, "checkpoint");
  ByteReader r(payload);
  if (r.raw(4) != kMagic) throw ParseError("checkpoint: bad magic at byte 0", 0);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint: unsupported format version " + std::to_string(version), version,
                       kCheckpointVersion);
  }
  const std::uint32_t dim_u = r.u32();
  const std::uint32_t layer_count = r.u32();
  if (dim_u == 0 || dim_u > 1u << 16) throw ParseError("checkpoint: invalid dimension at byte 8", 8);
  if (layer_count == 0) throw ParseError("checkpoint: missing standardizer at byte 12", 12);
  const int d = static_cast<int>(dim_u);
  const std::size_t tri = static_cast<std::size_t>(d) * (d - 1) / 2;

  FlowModel model(d);
  for (std::uint32_t li = 0; li < layer_count; ++li) {
    RawLayer raw;
    raw.offset = r.offset();
    const std::uint8_t tag = r.u8();
    if (tag > 3) malformed("unknown layer tag " + std::to_string(tag), raw.offset);
    raw.tag = static_cast<Tag>(tag);
    const std::uint32_t nfields = r.u32();
    if (nfields > 64) malformed("implausible field count", raw.offset);
    std::vector<std::uint32_t> lengths(nfields);
    for (auto& len : lengths) len = r.u32();
    for (auto len : lengths) {
      if (len > r.remaining() / 8) malformed("field length exceeds file size", raw.offset);
      Field f(len);
      for (auto& v : f) v = r.f64();
      raw.fields.push_back(std::move(f));
    }
    if ((li == 0) != (raw.tag == Tag::kStandardizer)) {
      malformed("standardizer must be the first and only pseudo-layer", raw.offset);
    }

    switch (raw.tag) {
      case Tag::kStandardizer: {
        expect_sizes(raw, {static_cast<std::size_t>(d), static_cast<std::size_t>(d)});
        Standardizer st{to_vector(raw.fields[0]), to_vector(raw.fields[1])};
        if (!(st.scale.array() > 0).all()) malformed("non-positive standardizer scale", raw.offset);
        model.set_standardizer(std::move(st));
        break;
      }
      case Tag::kActNorm: {
        expect_sizes(raw, {static_cast<std::size_t>(d), static_cast<std::size_t>(d), 1});
        model.add_layer(ActNorm{to_vector(raw.fields[0]), to_vector(raw.fields[1]), raw.fields[2][0] != 0.0});
        break;
      }
      case Tag::kInvLinear: {
        const auto du = static_cast<std::size_t>(d);
        expect_sizes(raw, {du, tri, tri, du, du});
        InvLinear l;
        for (double p : raw.fields[0]) l.permutation.push_back(static_cast<int>(p));
        std::vector<int> sorted = l.permutation;
        std::sort(sorted.begin(), sorted.end());
        for (int i = 0; i < d; ++i) {
          if (sorted[static_cast<std::size_t>(i)] != i) malformed("invalid permutation", raw.offset);
        }
        l.lower = to_vector(raw.fields[1]);
        l.upper = to_vector(raw.fields[2]);
        l.log_diag = to_vector(raw.fields[3]);
        l.sign = to_vector(raw.fields[4]);
        model.add_layer(std::move(l));
        break;
      }
      case Tag::kCoupling: {
        if (raw.fields.size() != 8 || raw.fields[0].size() != 1 || raw.fields[1].size() != 1) {
          malformed("coupling header fields", raw.offset);
        }
        AffineCoupling c;
        c.parity = static_cast<int>(raw.fields[0][0]);
        c.clamp = raw.fields[1][0];
        if ((c.parity != 0 && c.parity != 1) || !(c.clamp > 0)) malformed("coupling parity/clamp", raw.offset);
        const std::size_t pass = static_cast<std::size_t>(d / 2);
        const std::size_t out = 2 * static_cast<std::size_t>(d - d / 2);
        const std::size_t hidden = raw.fields[3].size();
        expect_sizes(raw, {1, 1, hidden * pass, hidden, hidden * hidden, hidden, out * hidden, out});
        const auto h = static_cast<Eigen::Index>(hidden);
        c.net.w1 = to_matrix(raw.fields[2], h, static_cast<Eigen::Index>(pass));
        c.net.b1 = to_vector(raw.fields[3]);
        c.net.w2 = to_matrix(raw.fields[4], h, h);
        c.net.b2 = to_vector(raw.fields[5]);
        c.net.w3 = to_matrix(raw.fields[6], static_cast<Eigen::Index>(out), h);
        c.net.b3 = to_vector(raw.fields[7]);
        model.add_layer(std::move(c));
        break;
      }
    }
  }
  if (r.remaining() != 0) {
    throw ParseError("checkpoint: trailing bytes at byte " + std::to_string(r.offset()), r.offset());
  }
  return model;
}

nlohmann::json architecture_json(const FlowModel& model) {
  int actnorms = 0, linears = 0, couplings = 0, hidden = 0;
  double clamp = 0.0;
  for (const auto& layer : model.layers()) {
    if (std::holds_alternative<ActNorm>(layer)) ++actnorms;
    if (std::holds_alternative<InvLinear>(layer)) ++linears;
    if (const auto* c = std::get_if<AffineCoupling>(&layer)) {
      ++couplings;
      hidden = c->net.hidden();
      clamp = c->clamp;
    }
  }
  return {{"format", "FPRO"},
          {"format_version", kCheckpointVersion},
          {"dim", model.dim()},
          {"layers", model.layers().size()},
          {"actnorm_layers", actnorms},
          {"invlinear_layers", linears},
          {"coupling_layers", couplings},
          {"hidden", hidden},
          {"clamp", clamp},
          {"parameter_count", model.parameter_count()}};
}

void save_checkpoint(const FlowModel& model, const std::filesystem::path& path, const nlohmann::json& extra) {
  nlohmann::json sidecar = architecture_json(model);
  for (auto it = extra.begin(); it != extra.end(); ++it) sidecar[it.key()] = it.value();
  write_file_atomic(path, encode_checkpoint(model));
  std::filesystem::path side = path;
  side += ".json";
  write_file_atomic(side, sidecar.dump(2) + "\n");
}

FlowModel load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

nlohmann::json load_checkpoint_sidecar(const std::filesystem::path& path) {
  std::filesystem::path side = path;
  side += ".json";
  try {
    return nlohmann::json::parse(read_file(side));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint sidecar " + side.string() + ": " + e.what(), 0);
  }
}

}  // namespace flowproto
