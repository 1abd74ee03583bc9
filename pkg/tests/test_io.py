import numpy as np
import pytest

from mftcnn.exceptions import ContractViolation
from mftcnn.io import (HEADER, dataset_from_bytes, dataset_from_csv, dataset_to_bytes, dataset_to_csv,
                       load_dataset, load_tensor, save_dataset, save_tensor, tensor_from_bytes,
                       tensor_from_csv, tensor_to_bytes, tensor_to_csv)


def tensor():
    return np.random.default_rng(0).normal(size=(3, 4, 2)) * 10.0 ** np.arange(-3, 5).reshape(1, 4, 2)


def test_header_layout():
    data = tensor_to_bytes(np.zeros((2, 5, 1)))
    assert HEADER.size == 16 and data[:4] == b"MFTC"
    assert len(data) == 16 + 8 * 10


def test_tensor_round_trips_bit_exact(tmp_path):
    t = tensor()
    assert np.array_equal(tensor_from_csv(tensor_to_csv(t)), t)
    back, end = tensor_from_bytes(tensor_to_bytes(t))
    assert np.array_equal(back, t) and end == 16 + 8 * t.size
    for name in ("t.csv", "t.bin"):
        save_tensor(tmp_path / name, t)
        assert np.array_equal(load_tensor(tmp_path / name), t)


def test_bad_inputs():
    with pytest.raises(ContractViolation):
        tensor_to_bytes(np.zeros((2, 2)))
    data = bytearray(tensor_to_bytes(np.zeros((1, 1, 1))))
    with pytest.raises(ContractViolation):
        tensor_from_bytes(bytes(data[:10]))
    with pytest.raises(ContractViolation):
        tensor_from_bytes(bytes(data[:-1]))
    data[0:4] = b"XXXX"
    with pytest.raises(ContractViolation):
        tensor_from_bytes(bytes(data))


@pytest.mark.parametrize("with_prov", [False, True])
def test_dataset_round_trips(tmp_path, with_prov):
    rng = np.random.default_rng(1)
    Z, Y = rng.normal(size=(12, 3)), rng.normal(size=(12, 2))
    prov = np.array([0] * 8 + [1] * 4) if with_prov else None
    for z, y, p in (dataset_from_csv(dataset_to_csv(Z, Y, 4, prov)),
                    dataset_from_bytes(dataset_to_bytes(Z, Y, 4, prov))):
        assert np.array_equal(z, Z) and np.array_equal(y, Y)
        assert (p is None) if prov is None else np.array_equal(p, prov)
    header = dataset_to_csv(Z, Y, 4, prov).splitlines()[0]
    assert header.startswith("sample,step,x_0,mean_x_0,b_0,u_0,mean_u_0")
    for name in ("d.csv", "d.bin"):
        save_dataset(tmp_path / name, Z, Y, 4, prov)
        z, y, _ = load_dataset(tmp_path / name)
        assert np.array_equal(z, Z) and np.array_equal(y, Y)
    with pytest.raises(ContractViolation):
        dataset_to_csv(Z, Y, 5)
