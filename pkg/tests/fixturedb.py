"""Small SQLite databases used across the test suite."""

from __future__ import annotations

import random
import sqlite3
from pathlib import Path

# the student-with-pets query over this data returns 35 rows:
# 32 students without pets, 1001 once (cat filtered in the join), 1002 twice
PET_LISTING = """SELECT s.Major, s.Age
FROM Student AS s
LEFT JOIN Has_Pet AS hp
    ON s.StuID = hp.StuID
    AND NOT EXISTS (
        SELECT 1
        FROM Pets p
        WHERE p.PetType = 'cat'
          AND p.PetID = hp.PetID
    );"""

BROKEN_PET_LISTING = "SELECT s.name AS Major, s.age AS Age FROM students AS s WHERE s.pet_type != 'cat';"

_LAST = ["Smith", "Kim", "Jones", "Kumar", "Gompers", "Schultz", "Apap", "Nelson", "Tai", "Lee",
         "Adams", "Davis", "Norris", "Wilson", "Leighton", "Kim", "Pang", "Thornton", "Andreou",
         "Woods", "Shieber", "Prater", "Goldman", "Pang", "Brody", "Rugh", "Han", "Cheng", "Simms",
         "Epp", "Schmidt", "Brown", "Lee", "Smith"]


def _connect(root: Path, name: str) -> sqlite3.Connection:
    path = root / name / f"{name}.sqlite"
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists():
        path.unlink()
    return sqlite3.connect(path)


def build_pets_db(root: Path) -> Path:
    rng = random.Random(3)
    con = _connect(root, "pets_1")
    con.executescript(
        """
        CREATE TABLE Student (
            StuID INTEGER PRIMARY KEY, LName VARCHAR(12), Fname VARCHAR(12), Age INTEGER,
            Sex VARCHAR(1), Major INTEGER, Advisor INTEGER, city_code VARCHAR(3));
        CREATE TABLE Pets (
            PetID INTEGER PRIMARY KEY, PetType VARCHAR(20), pet_age INTEGER, weight REAL);
        CREATE TABLE Has_Pet (
            StuID INTEGER, PetID INTEGER,
            FOREIGN KEY (PetID) REFERENCES Pets(PetID),
            FOREIGN KEY (StuID) REFERENCES Student(StuID));
        """
    )
    for i, lname in enumerate(_LAST):
        con.execute(
            "INSERT INTO Student VALUES (?,?,?,?,?,?,?,?)",
            (1001 + i, lname, f"F{i:02d}", rng.randint(16, 27), rng.choice("MF"),
             rng.choice([50, 520, 540, 550, 600]), rng.randint(1100, 9000), rng.choice(["BAL", "HKG", "NYC", "PIT"])),
        )
    con.executemany("INSERT INTO Pets VALUES (?,?,?,?)",
                    [(2001, "cat", 3, 12.0), (2002, "dog", 2, 13.4), (2003, "dog", 1, 9.3)])
    con.executemany("INSERT INTO Has_Pet VALUES (?,?)", [(1001, 2001), (1002, 2002), (1002, 2003)])
    con.commit()
    con.close()
    return root / "pets_1" / "pets_1.sqlite"


def build_employees_db(root: Path) -> Path:
    con = _connect(root, "company")
    con.execute(
        "CREATE TABLE employee (emp_id INTEGER PRIMARY KEY, name TEXT, age INTEGER, "
        "salary INTEGER, dept TEXT, city TEXT)"
    )
    rows = [
        (1, "Ada", 45, 72000, "Sales", "Austin"),
        (2, "Ben", 29, 41000, "Sales", "Boston"),
        (3, "Cleo", 52, 88000, "Research", "Denver"),
        (4, "Dev", 40, 50000, "Support", "Austin"),
        (5, "Eve", 33, 61000, "Research", "Boston"),
        (6, "Finn", 24, 38000, "Support", "Chicago"),
        (7, "Gus", 61, 95000, "Sales", "Denver"),
        (8, "Hana", 38, 50000, "Research", "Chicago"),
        (9, "Ivo", 27, 45000, "Sales", "Austin"),
        (10, "Jade", 50, 67000, "Support", "Boston"),
    ]
    con.executemany("INSERT INTO employee VALUES (?,?,?,?,?,?)", rows)
    con.commit()
    con.close()
    return root / "company" / "company.sqlite"


def build_shop_db(root: Path) -> Path:
    con = _connect(root, "shop")
    con.execute(
        "CREATE TABLE products (prod_id INTEGER PRIMARY KEY, title TEXT, price REAL, "
        "stock INTEGER, category TEXT)"
    )
    rows = [
        (1, "kite", 12.5, 40, "toys"),
        (2, "yo-yo", 3.0, 120, "toys"),
        (3, "lamp", 25.0, 15, "home"),
        (4, "mug", 8.0, 60, "home"),
        (5, "puzzle", 20.0, 33, "toys"),
        (6, "chair", 49.0, 7, "home"),
        (7, "marbles", 9.5, 80, "toys"),
    ]
    con.executemany("INSERT INTO products VALUES (?,?,?,?,?)", rows)
    con.commit()
    con.close()
    return root / "shop" / "shop.sqlite"


def build_numbers_db(root: Path, n: int) -> Path:
    con = _connect(root, "numbers")
    con.execute("CREATE TABLE n (i INTEGER)")
    con.executemany("INSERT INTO n VALUES (?)", [(i,) for i in range(n)])
    con.commit()
    con.close()
    return root / "numbers" / "numbers.sqlite"
