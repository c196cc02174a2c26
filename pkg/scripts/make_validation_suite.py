"""Regenerate src/nvcce/data/validation_suite.json (pinned gCCE validation instances)."""
import json, numpy as np
from nvcce.bath import BathSpin, bath_to_json, diamond_sites, point_dipole_hyperfine, sort_bath
from nvcce.cce import CceConfig, CoherenceProblem, exact_coherence, full_system
from nvcce.protocol import RAMSEY
from nvcce.spin_core import C13, GYRO_ELECTRON, CentralSpinModel
c = CentralSpinModel(D=2870.0)
sites = diamond_sites(3.567, 16.0)
r=np.linalg.norm(sites,axis=1)
cand=sites[(r>8)&(r<14)]
out=[]
B=(0.0,0.0,20.0)
for nb in (2,3):
  for seed in range(3):
    rng=np.random.default_rng(100+seed)
    while True:
        idx=rng.choice(len(cand),nb,replace=False)
        P=cand[idx]
        d=[np.linalg.norm(P[i]-P[j]) for i in range(nb) for j in range(i+1,nb)]
        if max(d)<8 and min(d)<4: break
    bath=sort_bath([BathSpin(C13,tuple(float(v) for v in x),point_dipole_hyperfine(x,GYRO_ELECTRON,C13.gyro)) for x in P])
    tt=np.linspace(0,4000,4001)
    ex=exact_coherence(CoherenceProblem(c,bath,B,CceConfig(core_spins=())),RAMSEY,tt).values
    k=int(np.argmax(np.abs(ex)<0.3))
    out.append({"name":f"c13x{nb}_s{100+seed}","D":2870.0,"E":0.0,"field":list(B),"t_max_us":float(tt[k]),"n_times":201,"r_dip":8.0,"bath":bath_to_json(bath)})
json.dump({"description":"Pinned instances for the gCCE-1 / gCCE-2 / exact comparison (electron-only core, Ramsey, ms0 to lower branch).","instances":out},open('src/nvcce/data/validation_suite.json','w'),indent=1)
print([o["t_max_us"] for o in out])
