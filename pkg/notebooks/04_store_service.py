# %% [markdown]
# # Fetching modules over the wire
#
# The store can be served over a small length-prefixed TCP protocol; clients
# list and fetch containers and verify their digests locally.

# %%
import tempfile

from pluto import service
from pluto.store import ModuleStore
from pluto.vit import VitConfig, random_module

store = ModuleStore(tempfile.mkdtemp(prefix="pluto-serve-"))
for j in range(4):
    store.put(random_module(VitConfig(), "vpt", 8, seed=j, module_id=f"vpt-demo-{j}", domain_label=f"demo:sev{j}"))

# %%
with service.serve(store, "127.0.0.1:0") as srv:
    print(srv.address)
    print([e["id"] for e in service.client_list(srv.address)])
    rec = service.client_get(srv.address, "vpt-demo-2")
    print(rec.id, rec.kind, rec.payload_param_count())
    try:
        service.client_get(srv.address, "missing")
    except service.RemoteNotFoundError as exc:
        print("error:", exc)
