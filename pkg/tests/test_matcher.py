import itertools

from _support import cluster
from oracles import fits_brute
from cloudsched.matcher import candidates, fits, fits_static, image_locator
from cloudsched.model import CloudType, Job, ResourcePool


def job(**kw):
    base = dict(global_job_id="1.0", user="u", vmtype="t", vm_loc="http://img")
    base.update(kw)
    return Job(**base)


def test_image_locator_by_cloud_type():
    j = job(vm_ami="ami-1")
    assert image_locator(j, cluster(cloud_type=CloudType.EC2)) == "ami-1"
    assert image_locator(j, cluster(cloud_type=CloudType.NIMBUS)) == "http://img"
    assert image_locator(job(vm_loc="", vm_ami="ami-2"), cluster()) == "ami-2"


def test_ec2_needs_ami():
    assert not fits(job(), cluster(cloud_type=CloudType.EC2))
    assert fits(job(vm_ami="ami-1"), cluster(cloud_type=CloudType.EC2))
    assert not fits(job(vm_loc="", vm_ami="ami-1"), cluster(cloud_type=CloudType.NIMBUS))


def test_full_cluster():
    c = cluster(slots=1)
    assert fits(job(), c)
    c.vms.append(object())
    assert not fits(job(), c)
    assert fits_static(job(), c)


def test_zero_slot_cluster_never_fits():
    assert not fits_static(job(), cluster(slots=0))


def test_candidates_keep_config_order():
    pool = ResourcePool([cluster("b", memory=256), cluster("a"), cluster("c")])
    assert candidates(job(vm_mem=512), pool) == ["a", "c"]
    assert candidates(job(vm_mem=10_000), pool) == []


def test_matches_brute_force():
    clusters = [
        cluster("c%d" % i, slots=s, archs=a, nets=n, memory=m, cores=k, storage=st, cloud_type=ct)
        for i, (s, a, n, m, k, st, ct) in enumerate(itertools.product(
            (0, 2), (("x86",), ("x86_64",), ("x86", "x86_64")), (("private",), ("public",)),
            (512, 2048), (1, 4), (0, 50), list(CloudType)))
    ]
    jobs = [
        job(vm_cpu_arch=a, vm_network=n, vm_mem=m, vm_cpu_cores=k, vm_storage=st, vm_loc=loc,
            vm_ami=ami)
        for a, n, m, k, st, (loc, ami) in itertools.product(
            ("x86", "x86_64"), ("private", "public"), (0, 1024, 2048), (1, 2, 4), (0, 20, 50),
            (("http://i", ""), ("", "ami-1"), ("http://i", "ami-1")))
    ]
    checked = 0
    for c in clusters:
        for used in (0, 1, 2):
            c.vms = [object()] * used
            for j in jobs:
                assert fits(j, c) == fits_brute(j, c, used), (j, c.name, used)
                checked += 1
    assert checked > 100_000
