"""Writes the synthetic 50-PT terminology in `$`-delimited distribution format.

Usage: python3 make_dictionary.py
"""
import os

HERE = os.path.dirname(os.path.abspath(__file__))

# soc -> [(hlgt, [(hlt, [pt, ...]), ...]), ...]; PT codes are assigned in order.
TREE = [
    ("Nervous system disorders", [
        ("Headaches", [
            ("Headaches NEC", ["Headache", "Migraine", "Tension headache"]),
            ("Sinus headaches", ["Sinus headache"]),
        ]),
        ("Neurological disorders NEC", [
            ("Neurological signs and symptoms NEC", ["Dizziness", "Somnolence", "Syncope-like"]),
            ("Paraesthesias and dysaesthesias", ["Paraesthesia", "Hypoaesthesia"]),
        ]),
    ]),
    ("Gastrointestinal disorders", [
        ("Gastrointestinal signs and symptoms", [
            ("Nausea and vomiting symptoms", ["Nausea", "Vomiting"]),
            ("Dyspeptic signs and symptoms", ["Dyspepsia", "Abdominal discomfort"]),
        ]),
        ("Gastrointestinal motility and defaecation conditions", [
            ("Diarrhoea (excl infective)", ["Diarrhoea"]),
            ("Gastrointestinal atonic and hypomotility disorders NEC", ["Constipation"]),
        ]),
    ]),
    ("Cardiac disorders", [
        ("Cardiac arrhythmias", [
            ("Rate and rhythm disorders NEC", ["Palpitations", "Tachycardia", "Bradycardia"]),
            ("Supraventricular arrhythmias", ["Atrial fibrillation"]),
        ]),
        ("Heart failures", [
            ("Heart failures NEC", ["Cardiac failure"]),
            ("Left ventricular failures", ["Left ventricular failure"]),
        ]),
    ]),
    ("Skin and subcutaneous tissue disorders", [
        ("Epidermal and dermal conditions", [
            ("Rashes, eruptions and exanthems NEC", ["Rash", "Rash maculo-papular"]),
            ("Pruritus NEC", ["Pruritus"]),
        ]),
        ("Skin appendage conditions", [
            ("Alopecias", ["Alopecia"]),
            ("Apocrine and eccrine gland disorders", ["Hyperhidrosis"]),
        ]),
    ]),
    ("General disorders and administration site conditions", [
        ("General system disorders NEC", [
            ("Febrile disorders", ["Pyrexia", "Chills"]),
            ("Asthenic conditions", ["Fatigue", "Asthenia", "Malaise"]),
        ]),
        ("Administration site reactions", [
            ("Infusion site reactions", ["Infusion site pain", "Infusion related reaction"]),
            ("Injection site reactions", ["Injection site erythema"]),
        ]),
    ]),
    ("Infections and infestations", [
        ("Infections - pathogen unspecified", [
            ("Sepsis, bacteraemia, viraemia and fungaemia NEC", ["Sepsis"]),
            ("Upper respiratory tract infections", ["Nasopharyngitis", "Upper respiratory tract infection"]),
        ]),
        ("Fungal infectious disorders", [
            ("Candida infections", ["Oral candidiasis"]),
            ("Fungal infections NEC", ["Fungal infection"]),
        ]),
    ]),
    ("Blood and lymphatic system disorders", [
        ("White blood cell disorders", [
            ("Neutropenias", ["Neutropenia", "Febrile neutropenia"]),
            ("Leukopenias NEC", ["Leukopenia"]),
        ]),
        ("Anaemias nonhaemolytic and marrow depression", [
            ("Anaemias NEC", ["Anaemia"]),
            ("Marrow depression and hypoplastic anaemias", ["Pancytopenia", "Thrombocytopenia"]),
        ]),
    ]),
]

# Appended to existing HLTs so PT codes 46-50 stay at the end.
EXTRA = [
    ("Neurological signs and symptoms NEC", "Vertigo"),
    ("Neurological signs and symptoms NEC", "Tremor"),
    ("Dyspeptic signs and symptoms", "Abdominal pain"),
    ("Rashes, eruptions and exanthems NEC", "Erythema"),
    ("Infusion site reactions", "Cytokine release syndrome"),
]

# Second, non-primary pathway for the multi-axial PT.
MULTI_AXIAL = ("Syncope-like", "Rate and rhythm disorders NEC")


def main():
    socs, hlgts, hlts, pts = [], [], [], []
    soc_hlgt, hlgt_hlt, hlt_pt = [], [], []
    hlt_code = {}
    pt_soc = {}
    for soc_name, hlgt_list in TREE:
        soc = 93000001 + len(socs)
        socs.append((soc, soc_name))
        for hlgt_name, hlt_list in hlgt_list:
            hlgt = 92000001 + len(hlgts)
            hlgts.append((hlgt, hlgt_name))
            soc_hlgt.append((soc, hlgt))
            for hlt_name, pt_list in hlt_list:
                hlt = 91000001 + len(hlts)
                hlts.append((hlt, hlt_name))
                hlt_code[hlt_name] = (hlt, soc)
                hlgt_hlt.append((hlgt, hlt))
                for pt_name in pt_list:
                    pt = 90000001 + len(pts)
                    pts.append((pt, pt_name, soc))
                    pt_soc[pt_name] = pt
                    flag = "Y" if pt_name == MULTI_AXIAL[0] else ""
                    hlt_pt.append((hlt, pt, flag))
    for hlt_name, pt_name in EXTRA:
        hlt, soc = hlt_code[hlt_name]
        pt = 90000001 + len(pts)
        pts.append((pt, pt_name, soc))
        pt_soc[pt_name] = pt
        hlt_pt.append((hlt, pt, ""))
    hlt_pt.append((hlt_code[MULTI_AXIAL[1]][0], pt_soc[MULTI_AXIAL[0]], ""))
    assert len(pts) == 50, len(pts)

    out = os.path.join(HERE, "meddra")
    os.makedirs(out, exist_ok=True)

    def write(name, rows):
        with open(os.path.join(out, name), "w", newline="\n") as f:
            for r in rows:
                f.write("$".join(str(x) for x in r) + "$\n")

    write("soc.asc", socs)
    write("hlgt.asc", hlgts)
    write("hlt.asc", hlts)
    write("pt.asc", [(c, n, "", s) for c, n, s in pts])
    write("soc_hlgt.asc", soc_hlgt)
    write("hlgt_hlt.asc", hlgt_hlt)
    write("hlt_pt.asc", hlt_pt)
    write("meddra_release.asc", [("28.0", "English", "synthetic")])


if __name__ == "__main__":
    main()
