#include "flowproto/data.hpp"

#include "flowproto/errors.hpp"
#include "flowproto/flow.hpp"
#include "flowproto/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

namespace flowproto {
namespace {

bool same_vectors(const std::vector<Vector>& a, const std::vector<Vector>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) return false;
    // Bitwise comparison so that NaN payloads and signed zeros round-trip.
    if (!std::equal(a[i].data(), a[i].data() + a[i].size(), b[i].data(),
                    [](double x, double y) { return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y); })) {
      return false;
    }
  }
  return true;
}

}  // namespace

std::string_view role_name(ClassRole role) {
  switch (role) {
    case ClassRole::kTrainLabeled: return "train-labeled";
    case ClassRole::kTrainUnlabeledOnly: return "train-unlabeled-only";
    case ClassRole::kValidation: return "validation";
    case ClassRole::kTest: return "test";
  }
  return "?";
}

ClassRole parse_role(std::string_view name) {
  for (auto r : {ClassRole::kTrainLabeled, ClassRole::kTrainUnlabeledOnly, ClassRole::kValidation, ClassRole::kTest}) {
    if (role_name(r) == name) return r;
  }
  throw ConfigError("unknown class role '" + std::string(name) + "'");
}

UnlabeledSet::UnlabeledSet(std::vector<Vector> features, std::vector<int> audit_ids)
    : features_(std::move(features)), audit_ids_(std::move(audit_ids)) {
  if (features_.size() != audit_ids_.size()) {
    throw ContractViolation("UnlabeledSet: features and audit ids differ in length");
  }
}

bool UnlabeledSet::operator==(const UnlabeledSet& other) const {
  return audit_ids_ == other.audit_ids_ && same_vectors(features_, other.features_);
}

std::vector<int> Dataset::classes_with_role(ClassRole role) const {
  std::vector<int> out;
  for (const auto& [id, r] : registry)
    if (r == role) out.push_back(id);
  return out;
}

void Dataset::validate() const {
  if (dim <= 0) throw ContractViolation("dataset: dimension must be positive");
  if (labeled_x.size() != labeled_y.size()) throw ContractViolation("dataset: labeled features/labels differ in length");
  for (std::size_t i = 0; i < labeled_x.size(); ++i) {
    if (labeled_x[i].size() != dim) throw ContractViolation("dataset: labeled example " + std::to_string(i) + " has wrong dimension");
    auto it = registry.find(labeled_y[i]);
    if (it == registry.end() || it->second == ClassRole::kTrainUnlabeledOnly) {
      throw ContractViolation("dataset: labeled class " + std::to_string(labeled_y[i]) + " is not registered for labeled use");
    }
  }
  for (const auto& v : unlabeled.features()) {
    if (v.size() != dim) throw ContractViolation("dataset: unlabeled example has wrong dimension");
  }
}

bool Dataset::operator==(const Dataset& other) const {
  return dim == other.dim && labeled_y == other.labeled_y && registry == other.registry &&
         provenance == other.provenance && unlabeled == other.unlabeled && same_vectors(labeled_x, other.labeled_x);
}

// ---------------------------------------------------------------------------

std::string_view family_name(GeneratorFamily family) {
  return family == GeneratorFamily::kGaussianBlobs ? "gaussian-blobs" : "concentric-rings";
}

std::string_view mode_name(ScenarioMode mode) { return mode == ScenarioMode::kDisjoint ? "disjoint" : "overlap"; }

RawPool generate(const GeneratorSpec& spec, Rng& rng) {
  if (spec.n_classes < 1 || spec.examples_per_class < 1 || spec.dim < 1) {
    throw ConfigError("generator: n_classes, examples_per_class and dim must be positive");
  }
  if (!(spec.separation > 0)) throw ConfigError("generator: separation must be > 0");
  if (!(spec.std >= 0)) throw ConfigError("generator: std must be >= 0");
  if (spec.family == GeneratorFamily::kConcentricRings && spec.dim != 2) {
    throw ConfigError("generator: concentric-rings requires dim 2 (got " + std::to_string(spec.dim) + ")");
  }

  RawPool pool;
  pool.dim = spec.dim;
  const auto n = static_cast<std::size_t>(spec.n_classes) * static_cast<std::size_t>(spec.examples_per_class);
  pool.features.reserve(n);
  pool.labels.reserve(n);

  if (spec.family == GeneratorFamily::kGaussianBlobs) {
    std::vector<Vector> centers;
    for (int c = 0; c < spec.n_classes; ++c) {
      Vector center(spec.dim);
      for (int j = 0; j < spec.dim; ++j) center[j] = rng.uniform(-spec.separation, spec.separation);
      centers.push_back(std::move(center));
    }
    for (int c = 0; c < spec.n_classes; ++c) {
      for (int i = 0; i < spec.examples_per_class; ++i) {
        Vector x(spec.dim);
        for (int j = 0; j < spec.dim; ++j) x[j] = centers[static_cast<std::size_t>(c)][j] + spec.std * rng.standard_normal();
        pool.features.push_back(std::move(x));
        pool.labels.push_back(c);
      }
    }
  } else {
    for (int c = 0; c < spec.n_classes; ++c) {
      const double radius = (c + 1) * spec.separation;
      for (int i = 0; i < spec.examples_per_class; ++i) {
        const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double r = radius + spec.std * rng.standard_normal();
        Vector x(2);
        x << r * std::cos(angle), r * std::sin(angle);
        pool.features.push_back(std::move(x));
        pool.labels.push_back(c);
      }
    }
  }
  return pool;
}

// ---------------------------------------------------------------------------

ScenarioFamily build_scenario(const RawPool& pool, const ScenarioSpec& scenario, Rng& rng,
                              const Provenance& provenance) {
  if (scenario.labeled_classes < 1 || scenario.labeled_per_class < 1) {
    throw ConfigError("scenario: labeled_classes and labeled_per_class must be positive");
  }
  if (scenario.validation_classes < 0 || scenario.test_classes < 0 || scenario.examples_per_added_class < 0) {
    throw ConfigError("scenario: class and example counts must be non-negative");
  }
  if (scenario.added_unlabeled_classes.empty()) throw ConfigError("scenario: added_unlabeled_classes is empty");
  for (int a : scenario.added_unlabeled_classes) {
    if (a < 0) throw ConfigError("scenario: added unlabeled class counts must be non-negative");
  }
  if (scenario.labeled_fraction && !(*scenario.labeled_fraction > 0 && *scenario.labeled_fraction <= 1)) {
    throw ConfigError("scenario: labeled_fraction must lie in (0, 1]");
  }

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < pool.labels.size(); ++i) by_class[pool.labels[i]].push_back(i);
  std::vector<int> classes;
  for (const auto& [id, members] : by_class) classes.push_back(id);

  const int max_added = *std::max_element(scenario.added_unlabeled_classes.begin(),
                                          scenario.added_unlabeled_classes.end());
  const int needed = scenario.labeled_classes + max_added + scenario.validation_classes + scenario.test_classes;
  if (static_cast<int>(classes.size()) < needed) {
    std::ostringstream msg;
    msg << "scenario: pool has " << classes.size() << " classes but " << needed << " are needed ("
        << scenario.labeled_classes << " labeled + " << max_added << " added unlabeled + "
        << scenario.validation_classes << " validation + " << scenario.test_classes << " test)";
    throw ConfigError(msg.str());
  }

  rng.shuffle(classes);
  auto take_classes = [&, next = std::size_t{0}](int count) mutable {
    std::vector<int> out(classes.begin() + static_cast<std::ptrdiff_t>(next),
                         classes.begin() + static_cast<std::ptrdiff_t>(next + static_cast<std::size_t>(count)));
    next += static_cast<std::size_t>(count);
    return out;
  };
  const std::vector<int> labeled_ids = take_classes(scenario.labeled_classes);
  const std::vector<int> added_ids = take_classes(max_added);
  const std::vector<int> val_ids = take_classes(scenario.validation_classes);
  const std::vector<int> test_ids = take_classes(scenario.test_classes);

  std::vector<std::string> shortfalls;
  std::vector<Vector> labeled_x, held_out_x;
  std::vector<int> labeled_y, held_out_y;
  for (int id : labeled_ids) {
    std::vector<std::size_t> members = by_class[id];
    rng.shuffle(members);
    std::size_t n_lab = static_cast<std::size_t>(scenario.labeled_per_class);
    if (scenario.mode == ScenarioMode::kOverlap && scenario.labeled_fraction) {
      n_lab = static_cast<std::size_t>(std::nearbyint(*scenario.labeled_fraction * static_cast<double>(members.size())));
      n_lab = std::max<std::size_t>(n_lab, 1);
    }
    if (members.size() < n_lab) {
      shortfalls.push_back("labeled class " + std::to_string(id) + " has " + std::to_string(members.size()) +
                           " examples, needs " + std::to_string(n_lab));
      continue;
    }
    for (std::size_t k = 0; k < members.size(); ++k) {
      if (k < n_lab) {
        labeled_x.push_back(pool.features[members[k]]);
        labeled_y.push_back(id);
      } else if (scenario.mode == ScenarioMode::kOverlap) {
        held_out_x.push_back(pool.features[members[k]]);
        held_out_y.push_back(id);
      }
    }
  }
  std::vector<std::vector<std::size_t>> added_members;
  const auto per_added = static_cast<std::size_t>(scenario.examples_per_added_class);
  for (int id : added_ids) {
    const auto& members = by_class[id];
    if (members.size() < per_added) {
      shortfalls.push_back("added class " + std::to_string(id) + " has " + std::to_string(members.size()) +
                           " examples, needs " + std::to_string(per_added));
      added_members.emplace_back();
      continue;
    }
    std::vector<std::size_t> chosen;
    for (std::size_t k : rng.choose_without_replacement(members.size(), per_added)) chosen.push_back(members[k]);
    added_members.push_back(std::move(chosen));
  }
  if (!shortfalls.empty()) {
    std::string msg = "scenario: insufficient pool:";
    for (const auto& s : shortfalls) msg += "\n  " + s;
    throw ConfigError(msg);
  }

  auto heldout_dataset = [&](const std::vector<int>& ids, ClassRole role, const std::string& tag) {
    Dataset ds;
    ds.dim = pool.dim;
    ds.provenance = provenance;
    ds.provenance.scenario = scenario.name + "/" + tag;
    for (int id : ids) {
      ds.registry[id] = role;
      for (std::size_t i : by_class[id]) {
        ds.labeled_x.push_back(pool.features[i]);
        ds.labeled_y.push_back(id);
      }
    }
    return ds;
  };

  ScenarioFamily family;
  family.added_counts = scenario.added_unlabeled_classes;
  for (int added : scenario.added_unlabeled_classes) {
    Dataset ds;
    ds.dim = pool.dim;
    ds.labeled_x = labeled_x;
    ds.labeled_y = labeled_y;
    ds.provenance = provenance;
    ds.provenance.scenario = scenario.name + "/" + std::string(mode_name(scenario.mode)) + "/added=" + std::to_string(added);
    for (int id : labeled_ids) ds.registry[id] = ClassRole::kTrainLabeled;
    std::vector<Vector> ux = held_out_x;
    std::vector<int> uy = held_out_y;
    for (int a = 0; a < added; ++a) {
      const int id = added_ids[static_cast<std::size_t>(a)];
      ds.registry[id] = ClassRole::kTrainUnlabeledOnly;
      for (std::size_t i : added_members[static_cast<std::size_t>(a)]) {
        ux.push_back(pool.features[i]);
        uy.push_back(id);
      }
    }
    ds.unlabeled = UnlabeledSet(std::move(ux), std::move(uy));
    family.train.push_back(std::move(ds));
  }
  family.validation = heldout_dataset(val_ids, ClassRole::kValidation, "validation");
  family.test = heldout_dataset(test_ids, ClassRole::kTest, "test");
  return family;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::string_view kDatasetMagic = "FPDS";

}  // namespace

// "FPDS" | version u32 | d u32 | labeled n u32 | unlabeled n u32 | registry n u32
// registry: (class id i32, role u8)...
// provenance: generator str | seed u64 | scenario str
// labeled block: (class id i32, d x f64)...
// unlabeled block: (d x f64)...
// audit block: class id i32 per unlabeled example
// CRC32 u32
std::string encode_dataset(const Dataset& dataset) {
  dataset.validate();
  ByteWriter w;
  w.raw(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(dataset.dim));
  w.u32(static_cast<std::uint32_t>(dataset.labeled_x.size()));
  w.u32(static_cast<std::uint32_t>(dataset.unlabeled.size()));
  w.u32(static_cast<std::uint32_t>(dataset.registry.size()));
  for (const auto& [id, role] : dataset.registry) {
    w.i32(id);
    w.u8(static_cast<std::uint8_t>(role));
  }
  w.str(dataset.provenance.generator);
  w.u64(dataset.provenance.seed);
  w.str(dataset.provenance.scenario);
  for (std::size_t i = 0; i < dataset.labeled_x.size(); ++i) {
    w.i32(dataset.labeled_y[i]);
    for (Eigen::Index j = 0; j < dataset.dim; ++j) w.f64(dataset.labeled_x[i][j]);
  }
  for (const auto& v : dataset.unlabeled.features())
    for (Eigen::Index j = 0; j < dataset.dim; ++j) w.f64(v[j]);
  for (int id : dataset.unlabeled.audit().ids) w.i32(id);
  return seal_with_crc(w.take());
}

Dataset decode_dataset(std::string_view bytes) {
  std::string_view payload = verify_crc(bytes, "dataset");
  ByteReader r(payload);
  if (r.raw(4) != kDatasetMagic) throw ParseError("dataset: bad magic at byte 0", 0);
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw VersionError("dataset: unsupported format version " + std::to_string(version), version, kDatasetVersion);
  }
  Dataset ds;
  const std::uint32_t dim = r.u32();
  if (dim == 0 || dim > 1u << 16) throw ParseError("dataset: invalid dimension at byte 8", 8);
  ds.dim = static_cast<int>(dim);
  const std::uint32_t n_lab = r.u32();
  const std::uint32_t n_unl = r.u32();
  const std::uint32_t n_reg = r.u32();
  const std::size_t min_bytes = (static_cast<std::size_t>(n_lab) + n_unl) * dim * 8 + static_cast<std::size_t>(n_reg) * 5;
  if (min_bytes > r.remaining()) {
    throw ParseError("dataset: declared counts exceed file size at byte " + std::to_string(r.offset()), r.offset());
  }
  for (std::uint32_t i = 0; i < n_reg; ++i) {
    const std::size_t at = r.offset();
    const std::int32_t id = r.i32();
    const std::uint8_t role = r.u8();
    if (role > 3) throw ParseError("dataset: invalid role byte at byte " + std::to_string(at + 4), at + 4);
    if (!ds.registry.emplace(id, static_cast<ClassRole>(role)).second) {
      throw ParseError("dataset: duplicate registry entry at byte " + std::to_string(at), at);
    }
  }
  ds.provenance.generator = r.str();
  ds.provenance.seed = r.u64();
  ds.provenance.scenario = r.str();
  for (std::uint32_t i = 0; i < n_lab; ++i) {
    const std::size_t at = r.offset();
    const int id = r.i32();
    auto it = ds.registry.find(id);
    if (it == ds.registry.end() || it->second == ClassRole::kTrainUnlabeledOnly) {
      throw ParseError("dataset: labeled example with unregistered class " + std::to_string(id) + " at byte " +
                           std::to_string(at),
                       at);
    }
    Vector x(ds.dim);
    for (int j = 0; j < ds.dim; ++j) x[j] = r.f64();
    ds.labeled_x.push_back(std::move(x));
    ds.labeled_y.push_back(id);
  }
  std::vector<Vector> ux;
  for (std::uint32_t i = 0; i < n_unl; ++i) {
    Vector x(ds.dim);
    for (int j = 0; j < ds.dim; ++j) x[j] = r.f64();
    ux.push_back(std::move(x));
  }
  std::vector<int> audit;
  for (std::uint32_t i = 0; i < n_unl; ++i) audit.push_back(r.i32());
  if (r.remaining() != 0) {
    throw ParseError("dataset: trailing bytes at byte " + std::to_string(r.offset()), r.offset());
  }
  ds.unlabeled = UnlabeledSet(std::move(ux), std::move(audit));
  return ds;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  write_file_atomic(path, encode_dataset(dataset));
}

Dataset read_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

// ---------------------------------------------------------------------------

std::map<std::string, ClassRole> default_csv_roles() {
  return {{"train-labeled", ClassRole::kTrainLabeled},
          {"train-unlabeled", ClassRole::kTrainUnlabeledOnly},
          {"validation", ClassRole::kValidation},
          {"test", ClassRole::kTest}};
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

[[noreturn]] void csv_error(std::size_t line, const std::string& what) {
  throw ParseError("csv line " + std::to_string(line) + ": " + what, line);
}

enum class Group { kTrain, kValidation, kTest };

}  // namespace

ImportedDatasets import_csv_text(std::string_view text, const std::map<std::string, ClassRole>& role_mapping) {
  std::vector<std::string_view> lines;
  {
    std::size_t start = 0;
    while (start <= text.size()) {
      const std::size_t nl = text.find('\n', start);
      lines.push_back(text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start));
      if (nl == std::string_view::npos) break;
      start = nl + 1;
    }
  }
  if (lines.empty() || trim(lines[0]).empty()) csv_error(1, "missing header");
  const std::string_view header = trim(lines[0]);
  const auto columns = split_commas(header);
  if (columns.size() < 3 || columns[0] != "split" || columns[1] != "class") {
    csv_error(1, "header must be split,class,f0,...");
  }
  const int d = static_cast<int>(columns.size()) - 2;
  for (int j = 0; j < d; ++j) {
    if (columns[static_cast<std::size_t>(j) + 2] != "f" + std::to_string(j)) {
      csv_error(1, "expected column f" + std::to_string(j) + ", found '" +
                       std::string(columns[static_cast<std::size_t>(j) + 2]) + "'");
    }
  }

  struct Row {
    ClassRole split;
    int cls;
    Vector x;
  };
  std::vector<Row> rows;
  std::map<int, std::pair<Group, std::size_t>> seen;
  std::set<int> labeled_classes;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const std::size_t line_no = li + 1;
    const std::string_view line = trim(lines[li]);
    if (line.empty()) continue;
    if (line == header) csv_error(line_no, "duplicate header");
    const auto cells = split_commas(line);
    if (cells.size() != columns.size()) {
      csv_error(line_no, "expected " + std::to_string(columns.size()) + " fields, found " + std::to_string(cells.size()));
    }
    auto role_it = role_mapping.find(std::string(cells[0]));
    if (role_it == role_mapping.end()) csv_error(line_no, "unknown split '" + std::string(cells[0]) + "'");
    Row row{role_it->second, kUnknownClass, Vector(d)};
    if (cells[1].empty()) {
      if (row.split != ClassRole::kTrainUnlabeledOnly) csv_error(line_no, "empty class on a labeled row");
    } else {
      const char* end = cells[1].data() + cells[1].size();
      auto [p, ec] = std::from_chars(cells[1].data(), end, row.cls);
      if (ec != std::errc() || p != end || row.cls < 0) {
        csv_error(line_no, "invalid class id '" + std::string(cells[1]) + "'");
      }
    }
    for (int j = 0; j < d; ++j) {
      const std::string_view cell = cells[static_cast<std::size_t>(j) + 2];
      const char* end = cell.data() + cell.size();
      double v = 0.0;
      auto [p, ec] = std::from_chars(cell.data(), end, v);
      if (cell.empty() || ec != std::errc() || p != end || !std::isfinite(v)) {
        csv_error(line_no, "non-numeric feature f" + std::to_string(j) + " '" + std::string(cell) + "'");
      }
      row.x[j] = v;
    }
    if (row.cls != kUnknownClass) {
      const Group g = row.split == ClassRole::kValidation ? Group::kValidation
                      : row.split == ClassRole::kTest     ? Group::kTest
                                                          : Group::kTrain;
      auto [it, inserted] = seen.emplace(row.cls, std::make_pair(g, line_no));
      if (!inserted && it->second.first != g) {
        csv_error(line_no, "class " + std::to_string(row.cls) + " already used by another split on line " +
                               std::to_string(it->second.second));
      }
      if (row.split == ClassRole::kTrainLabeled) labeled_classes.insert(row.cls);
    }
    rows.push_back(std::move(row));
  }

  std::vector<Vector> train_x;
  for (const auto& row : rows) {
    if (row.split == ClassRole::kTrainLabeled || row.split == ClassRole::kTrainUnlabeledOnly) train_x.push_back(row.x);
  }
  if (train_x.empty()) throw ConfigError("csv: no train rows to standardize on");
  const Standardizer st = Standardizer::fit(stack_columns(train_x, d));

  ImportedDatasets out;
  for (Dataset* ds : {&out.train, &out.validation, &out.test}) {
    ds->dim = d;
    ds->provenance.generator = "csv";
  }
  out.train.provenance.scenario = "train";
  out.validation.provenance.scenario = "validation";
  out.test.provenance.scenario = "test";
  std::vector<Vector> ux;
  std::vector<int> uy;
  for (auto& row : rows) {
    Vector x = ((row.x - st.mean).array() / st.scale.array()).matrix();
    switch (row.split) {
      case ClassRole::kTrainLabeled:
        out.train.labeled_x.push_back(std::move(x));
        out.train.labeled_y.push_back(row.cls);
        out.train.registry[row.cls] = ClassRole::kTrainLabeled;
        break;
      case ClassRole::kTrainUnlabeledOnly:
        ux.push_back(std::move(x));
        uy.push_back(row.cls);
        if (row.cls != kUnknownClass && !labeled_classes.count(row.cls)) {
          out.train.registry[row.cls] = ClassRole::kTrainUnlabeledOnly;
        }
        break;
      case ClassRole::kValidation:
        out.validation.labeled_x.push_back(std::move(x));
        out.validation.labeled_y.push_back(row.cls);
        out.validation.registry[row.cls] = ClassRole::kValidation;
        break;
      case ClassRole::kTest:
        out.test.labeled_x.push_back(std::move(x));
        out.test.labeled_y.push_back(row.cls);
        out.test.registry[row.cls] = ClassRole::kTest;
        break;
    }
  }
  out.train.unlabeled = UnlabeledSet(std::move(ux), std::move(uy));
  return out;
}

ImportedDatasets import_csv(const std::filesystem::path& path, const std::map<std::string, ClassRole>& role_mapping) {
  ImportedDatasets out = import_csv_text(read_file(path), role_mapping);
  for (Dataset* ds : {&out.train, &out.validation, &out.test}) {
    ds->provenance.scenario = path.filename().string() + "/" + ds->provenance.scenario;
  }
  return out;
}

}  // namespace flowproto
