"""Which clusters can host the VM a job asks for.

``memory``, ``storage`` and ``cpu_cores`` on a cluster are per-VM maxima;
only ``vm_slots`` is used up as VMs boot.
"""
from __future__ import annotations

from typing import List

from .model import CloudType, Cluster, Job, ResourcePool


def image_locator(job: Job, cluster: Cluster) -> str:
    """The image reference a cluster would boot for ``job`` ("" if none).

    EC2-like clouds take an AMI id; everything else takes the image URL.
    Simulated clouds accept either.
    """
    if cluster.cloud_type is CloudType.EC2:
        return job.vm_ami
    if cluster.cloud_type is CloudType.NIMBUS:
        return job.vm_loc
    return job.vm_loc or job.vm_ami


def fits_static(job: Job, cluster: Cluster) -> bool:
    """``fits`` without the free-slot check."""
    return (
        job.vm_cpu_arch in cluster.cpu_archs
        and job.vm_network in cluster.networks
        and job.vm_mem <= cluster.memory
        and job.vm_storage <= cluster.storage
        and job.vm_cpu_cores <= cluster.cpu_cores
        and cluster.vm_slots > 0
        and bool(image_locator(job, cluster))
    )


def fits(job: Job, cluster: Cluster) -> bool:
    return len(cluster.vms) < cluster.vm_slots and fits_static(job, cluster)


def candidates(job: Job, pool: ResourcePool) -> List[str]:
    """Names of clusters that can boot ``job``'s VM now, in config order."""
    return [c.name for c in pool.clusters if fits(job, c)]
