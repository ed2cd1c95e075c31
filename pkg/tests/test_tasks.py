import pytest

from mtlbandit.tasks import ConfigurationError, Task, TaskRegistry


def test_registry_indexing_is_dense_and_grouped():
    reg = TaskRegistry({"tsp": [5, 8], "kp": [10]})
    assert reg.names == ["tsp-5", "tsp-8", "kp-10"]
    assert [reg.index(t) for t in reg] == [0, 1, 2]
    assert reg.cop_index(2) == 1
    assert reg.tasks_of("tsp") == [Task("tsp", 5), Task("tsp", 8)]


def test_from_names_roundtrip():
    reg = TaskRegistry.from_names(["tsp-5", "kp-10", "tsp-8"])
    assert reg.to_dict() == {"tsp": [5, 8], "kp": [10]}
    assert TaskRegistry(reg.to_dict()) == reg


@pytest.mark.parametrize("bad", [{"tsp": [13]}, {"cvrp": [7]}, {"foo": [3]}, {"tsp": []}, {"tsp": [5, 5]}, {}])
def test_invalid_registries(bad):
    with pytest.raises(ConfigurationError):
        TaskRegistry(bad)


@pytest.mark.parametrize("name", ["tsp", "tsp-x", "op-11", "kp-0"])
def test_bad_task_names(name):
    with pytest.raises(ConfigurationError):
        Task.parse(name)


def test_sense():
    assert Task("tsp", 5).minimize and Task("cvrp", 5).minimize
    assert not Task("op", 5).minimize and not Task("kp", 5).minimize
