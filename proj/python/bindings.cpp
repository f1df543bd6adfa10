#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "wf/checkpoint_io.hpp"
#include "wf/error.hpp"
#include "wf/tokenizer.hpp"

namespace py = pybind11;
using namespace wf;

namespace {

py::array to_array(const TensorRecord& r) {
    std::vector<py::ssize_t> shape(r.shape.begin(), r.shape.end());
    if (r.dtype == Dtype::F32) {
        py::array_t<float> a(shape);
        auto* out = a.mutable_data();
        for (std::size_t i = 0; i < r.values.size(); ++i) out[i] = static_cast<float>(r.values[i]);
        return std::move(a);
    }
    py::array_t<double> a(shape);
    if (!r.values.empty()) std::memcpy(a.mutable_data(), r.values.data(), r.values.size() * sizeof(double));
    return std::move(a);
}

TensorRecord from_array(const std::string& name, const py::handle& obj) {
    const py::array arr = py::array::ensure(obj);
    if (!arr) throw py::type_error("tensor '" + name + "' is not array-like");
    TensorRecord r;
    r.name = name;
    for (py::ssize_t i = 0; i < arr.ndim(); ++i) r.shape.push_back(static_cast<std::size_t>(arr.shape(i)));
    if (arr.dtype().is(py::dtype::of<float>())) {
        r.dtype = Dtype::F32;
        const auto c = py::array_t<float, py::array::c_style | py::array::forcecast>::ensure(arr);
        r.values.assign(c.data(), c.data() + c.size());
    } else if (arr.dtype().is(py::dtype::of<double>())) {
        r.dtype = Dtype::F64;
        const auto c = py::array_t<double, py::array::c_style | py::array::forcecast>::ensure(arr);
        r.values.assign(c.data(), c.data() + c.size());
    } else {
        throw py::type_error("tensor '" + name + "' has dtype " + py::str(arr.dtype()).cast<std::string>() +
                             "; only float32 and float64 are supported");
    }
    return r;
}

TensorMap to_map(const py::dict& tensors, const std::optional<std::map<std::string, std::string>>& metadata) {
    std::vector<TensorRecord> records;
    for (const auto& [k, v] : tensors) records.push_back(from_array(k.cast<std::string>(), v));
    Metadata meta = metadata.value_or(Metadata{});
    std::string source_id;
    if (auto it = meta.find("source_id"); it != meta.end()) {
        source_id = it->second;
        meta.erase(it);
    }
    return TensorMap(std::move(records), source_id, std::move(meta));
}

py::tuple from_map(const TensorMap& map) {
    py::dict tensors;
    for (const auto& r : map.records()) tensors[py::str(r.name)] = to_array(r);
    Metadata meta = map.metadata();
    if (!map.source_id().empty()) meta["source_id"] = map.source_id();
    return py::make_tuple(tensors, meta);
}

py::array_t<double> matrix_array(const Matrix& m) {
    py::array_t<double> a({m.rows(), m.cols()});
    auto view = a.mutable_unchecked<2>();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) view(i, j) = m(i, j);
    }
    return a;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Weight-space toolkit core: checkpoint container, tokenizer, architecture inference";

    static py::exception<Error> wf_error(m, "WfError", PyExc_ValueError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            py::object kind = py::str(std::string(to_string(e.kind())));
            py::set_error(wf_error, py::make_tuple(e.what(), kind));
        }
    });

    m.def(
        "parse",
        [](const py::bytes& data) {
            const std::string_view view = data;
            return from_map(parse_checkpoint(
                std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(view.data()), view.size())));
        },
        py::arg("data"), "Parse container bytes into (tensors, metadata).");

    m.def(
        "serialize",
        [](const py::dict& tensors, std::optional<std::map<std::string, std::string>> metadata) {
            const auto bytes = write_checkpoint(to_map(tensors, metadata));
            return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
        },
        py::arg("tensors"), py::arg("metadata") = py::none(), "Serialize tensors in canonical order.");

    m.def(
        "read_file", [](const std::filesystem::path& path) { return from_map(read_checkpoint_file(path)); },
        py::arg("path"));

    m.def(
        "write_file",
        [](const std::filesystem::path& path, const py::dict& tensors,
           std::optional<std::map<std::string, std::string>> metadata) {
            write_checkpoint_file(path, to_map(tensors, metadata));
        },
        py::arg("path"), py::arg("tensors"), py::arg("metadata") = py::none());

    m.def(
        "infer_architecture",
        [](const py::dict& tensors, const std::string& filename) {
            const ArchInference a = infer_architecture(to_map(tensors, std::nullopt), filename);
            py::dict out;
            out["family"] = std::string(to_string(a.family));
            out["modality"] = std::string(to_string(a.modality_hint));
            out["in_channels"] = a.in_channels ? py::object(py::int_(*a.in_channels)) : py::object(py::none());
            out["embed_dim"] = a.embed_dim ? py::object(py::int_(*a.embed_dim)) : py::object(py::none());
            return out;
        },
        py::arg("tensors"), py::arg("filename") = "");

    m.def("load_keywords", &load_keyword_vocabulary, py::arg("path"), "One keyword per line, blank lines skipped.");

    py::class_<TokenSequence>(m, "TokenSequence")
        .def_property_readonly("tokens", [](const TokenSequence& s) { return matrix_array(s.tokens); })
        .def_property_readonly("mask", [](const TokenSequence& s) { return matrix_array(s.mask); })
        .def_property_readonly("positions",
                               [](const TokenSequence& s) {
                                   py::array_t<std::int64_t> a({static_cast<py::ssize_t>(s.positions.size()), py::ssize_t{3}});
                                   auto v = a.mutable_unchecked<2>();
                                   for (std::size_t i = 0; i < s.positions.size(); ++i) {
                                       const auto r = static_cast<py::ssize_t>(i);
                                       v(r, 0) = s.positions[i].n;
                                       v(r, 1) = s.positions[i].l;
                                       v(r, 2) = s.positions[i].k;
                                   }
                                   return a;
                               })
        .def_readonly("d_t", &TokenSequence::d_t)
        .def("__len__", &TokenSequence::size)
        .def("detokenize", [](const TokenSequence& s) { return from_map(detokenize(s)); });

    m.def(
        "tokenize",
        [](const py::dict& tensors, std::size_t d_t, std::optional<std::map<std::string, std::string>> metadata) {
            return tokenize_model(to_map(tensors, metadata), d_t);
        },
        py::arg("tensors"), py::arg("d_t"), py::arg("metadata") = py::none());
}
